from beamlab.pipeline.type import Pipeline
from beamlab.wave_forward import BoundaryData, discrete_energy, manufactured_study, solve_semilinear


def boundary_data(pipeline: Pipeline) -> BoundaryData:
    cfg = pipeline.config.boundary
    if cfg.sample_file is not None:
        return BoundaryData.from_file(pipeline.lattice, cfg.sample_file, pipeline.gamma, cfg.s_data)
    return BoundaryData.from_waveform(pipeline.lattice, cfg, pipeline.gamma)


class Forward(Pipeline, name="forward"):
    """Semilinear solve for the configured data, plus a manufactured-solution convergence study"""

    def run(self) -> None:
        solver = self.config.solver
        V, _ = self.nonlinearities
        with self.stage("semilinear solve"):
            f = boundary_data(self)
            solution = solve_semilinear(self.problem, V, f, solver.picard_tol, solver.max_iterations)
            self.artifacts.grid("solution.bin", solution.u)
            report = solution.report
            ratios = [float("nan"), *report.ratios]
            self.artifacts.csv("picard.csv", ["iteration", "increment", "ratio"], [[i + 1, inc, r] for i, (inc, r) in enumerate(zip(report.increments, ratios))])
        self.check("picard_contraction", report.converged and report.max_ratio < 0.5, f"{report.iterations} iteration(s), max ratio {report.max_ratio:.3e}")

        with self.stage("energy"):
            linear = solve_semilinear(self.problem, V.zero(V.k_max), f, solver.picard_tol, solver.max_iterations).u
            energy = discrete_energy(self.problem, linear)
            self.artifacts.csv("energy.csv", ["level", "energy"], [[n, float(e)] for n, e in enumerate(energy)])

        if solver.refinements == 0:
            self.verdict("convergence_order", "skipped", "no refinements requested")
            return
        with self.stage("manufactured solution"):
            study = manufactured_study(self.problem, solver.refinements)
            self.artifacts.csv("convergence.csv", ["shape", "sup_error"], [["x".join(map(str, s)), e] for s, e in zip(study.shapes, study.errors)])
        self.check("convergence_order", study.order >= 1.9, f"observed orders {', '.join(f'{o:.2f}' for o in study.orders)}")
