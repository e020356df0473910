from beamlab.pipeline.type import Pipeline
from beamlab.wave_forward import boundary_battery, dtn_apply


class Dtn(Pipeline, name="dtn"):
    """Partial DtN map on a battery of Gamma-supported inputs, for one or two nonlinearities"""

    def run(self) -> None:
        first, second = self.nonlinearities
        battery = boundary_battery(self.lattice, self.config.boundary, self.gamma)
        traces = {}
        for label, V in (("first", first), ("second", second)):
            if V is None:
                continue
            samples = V.sample(self.lattice)
            with self.stage(f"dtn {label}"):
                traces[label] = []
                for i, f in enumerate(battery):
                    sample = dtn_apply(self.problem, V, f, self.gamma, samples)
                    self.artifacts.add(sample.write(self.artifacts.path(f"dtn_{label}_{i}.csv")))
                    traces[label].append(sample)
            ratio = max(s.report.max_ratio for s in traces[label])
            self.check(f"picard_{label}", all(s.report.converged for s in traces[label]), f"max ratio {ratio:.3e} over {len(battery)} input(s)")

        if second is None:
            self.verdict("discrepancy", "skipped", "no second nonlinearity configured")
            return
        rows = [[i, (a.trace - b.trace).sup_norm()] for i, (a, b) in enumerate(zip(traces["first"], traces["second"]))]
        self.artifacts.csv("discrepancy.csv", ["input", "sup_norm"], rows)
        worst = max(r[1] for r in rows)
        self.verdict("discrepancy", "pass", f"max trace discrepancy {worst:.3e}")
