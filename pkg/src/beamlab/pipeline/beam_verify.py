import numpy as np

from beamlab.causal_geom import shoot_null_geodesic
from beamlab.gaussian_beam import (
    BeamChain,
    DecayReport,
    assemble_quasimode,
    boundary_smallness,
    build_beam_chain,
    defect_profile,
    make_remainder,
    remainder_decay,
    residual_decay,
    write_beam,
)
from beamlab.lib.const import TAU_CONJ
from beamlab.pipeline.type import Pipeline

DECAY_HEADER = ["rho", "norm_L2", "norm_Hk", "slope", "target_K", "verdict"]


def decay_rows(l2: DecayReport, hk: DecayReport | None = None) -> list[list]:
    hk = l2 if hk is None else hk
    verdict = "pass" if l2.passed and hk.passed else "fail"
    slope = float("nan") if hk.slope is None else hk.slope
    return [[rho, a, b, slope, hk.target, verdict] for rho, a, b in zip(l2.rhos, l2.norms, hk.norms)]


def describe(report: DecayReport) -> str:
    if report.exact:
        return "exact solution, norms at roundoff"
    return f"slope {report.slope:.3f}, target {report.target:.3f}"


class BeamVerify(Pipeline, name="beam-verify"):
    """Gaussian beam along the configured geodesic and its asymptotic checks"""

    def build(self) -> BeamChain:
        cfg = self.config.beam
        p, xi = self.start_direction()
        geodesic = shoot_null_geodesic(self.spec, p, xi, cfg.max_reflections)
        return build_beam_chain(self.spec, geodesic, cfg.N, cfg.h0_scale, cfg.chart_radius, cfg.chart_margin, cfg.s_nodes)

    def run(self) -> None:
        cfg = self.config.beam
        with self.stage("construction"):
            chain = self.build()
            incident = chain.beams[0]
            for i, beam in enumerate(chain.beams):
                self.artifacts.add(write_beam(beam, self.artifacts.path(f"beam_{i}"), cfg.kappa))

        invariant = incident.phase.invariant()
        drift = float(np.abs(invariant - invariant[0]).max() / abs(invariant[0]))
        self.check("riccati_invariant", drift <= TAU_CONJ, f"relative drift {drift:.3e}")

        with self.stage("defects"):
            rows = []
            for label, jet in (("eikonal", incident.phase.defect), ("transport", incident.amplitude.defects[0])):
                radii, values, slope = defect_profile(jet, incident.chart)
                rows += [[label, r, v] for r, v in zip(radii, values)]
                if slope is None:
                    self.verdict(f"{label}_defect_order", "pass", "defect vanishes")
                else:
                    self.check(f"{label}_defect_order", slope >= cfg.N + 0.8, f"slope {slope:.3f}")
            self.artifacts.csv("defects.csv", ["defect", "radius", "max_abs"], rows)

        with self.stage("residual decay"):
            l2 = residual_decay(chain, self.lattice, cfg.rho_list, 0, cfg.kappa)
            hk = residual_decay(chain, self.lattice, cfg.rho_list, cfg.k, cfg.kappa) if cfg.k else None
            self.artifacts.csv("residual_decay.csv", DECAY_HEADER, decay_rows(l2, hk))
        report = hk or l2
        self.check("residual_decay", l2.passed and report.passed, describe(report))

        if len(chain.beams) > 1:
            with self.stage("boundary smallness"):
                trace = boundary_smallness(chain.beams[0], chain.beams[1], self.lattice, cfg.rho_list, cfg.k, cfg.kappa)
                self.artifacts.csv("boundary_smallness.csv", DECAY_HEADER, decay_rows(trace))
            self.check("boundary_smallness", trace.passed, describe(trace))
        else:
            self.verdict("boundary_smallness", "skipped", "the geodesic has no reflection")

        with self.stage("remainders"):
            remainders = [
                make_remainder(assemble_quasimode(chain, self.lattice, rho, cfg.kappa), self.problem, "forward", self.config.solver.residual)
                for rho in sorted(cfg.rho_list)
            ]
            decay = remainder_decay(remainders, self.spec.n)
            self.artifacts.csv("remainder_decay.csv", ["rho", "sup_norm"], [[r.rho, r.sup_norm] for r in remainders])
        self.check("remainder_decay", decay.passed, describe(decay))
