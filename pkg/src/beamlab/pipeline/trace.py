import numpy as np

from beamlab.causal_geom import (
    build_fermi_chart,
    conjugate_point_scan,
    null_convexity_scan,
    shoot_null_geodesic,
)
from beamlab.lib.const import TAU_NULL
from beamlab.pipeline.type import Pipeline


def boundary_samples(pipeline: Pipeline, count: int = 64) -> np.ndarray:
    """Space-time points on the lateral boundary, spread over [0, T]"""
    spec = pipeline.spec
    lattice = pipeline.lattice
    spatial = lattice.spatial_points()[lattice.boundary(spec.domain)]
    picks = pipeline.rng.choice(len(spatial), size=min(count, len(spatial)), replace=False)
    times = pipeline.rng.uniform(0.0, spec.T, size=len(picks))
    return np.column_stack([times, spatial[np.sort(picks)]])


class Trace(Pipeline, name="trace"):
    """Broken null geodesic from the configured start, its charts, the boundary convexity and the recoverable set"""

    def run(self) -> None:
        cfg = self.config.beam
        with self.stage("geodesic"):
            p, xi = self.start_direction()
            geodesic = shoot_null_geodesic(self.spec, p, xi, cfg.max_reflections)
            self.artifacts.csv("geodesic.csv", geodesic.header(), geodesic.rows())
        self.check("null_defect", geodesic.max_defect <= 1e3 * TAU_NULL, f"max relative g(v, v) = {geodesic.max_defect:.3e}")

        with self.stage("conjugate points"):
            pieces = [geodesic.through_segment(), *geodesic.segments[1:]]
            conjugate, radii = [], []
            for segment in pieces:
                chart = build_fermi_chart(self.spec, segment, cfg.N, radius=cfg.chart_radius, margin=cfg.chart_margin, nodes=cfg.s_nodes)
                conjugate.append(conjugate_point_scan(chart))
                radii.append(chart.radius)
        hits = [s for s in conjugate if s is not None]
        radius_note = "chart radii " + ", ".join(f"{r:.4g}" for r in radii)
        detail = f"first conjugate parameter {hits[0]:.6g}" if hits else f"{len(pieces)} segment(s)"
        self.check("no_conjugate_points", not hits, f"{detail}; {radius_note}")

        with self.stage("null convexity"):
            report = null_convexity_scan(self.spec, boundary_samples(self))
            self.artifacts.csv("convexity.csv", ["sample", "second_fundamental_form"], ((i, float(v)) for i, v in enumerate(report.values)))
        self.check("null_convex", not report.violated, f"min II(V, V) = {report.minimum:.3e}")

        with self.stage("recoverable set"):
            reach = self.reach
            self.artifacts.mask("recoverable.bin", self.lattice, reach.mask)
        covered = int(reach.mask.sum())
        if covered:
            self.verdict("recoverable_set", "pass", f"{covered} of {reach.mask.size} nodes")
        else:
            self.verdict("recoverable_set", "skipped", "no interior node is reachable from the lateral boundary in [0, T]")
