from pathlib import Path

import numpy as np
import pytest
import yaml

from beamlab.lattice import Lattice
from beamlab.lib.config import BoundaryConfig
from beamlab.spacetime import Interval, MetricSpec, SpacetimePoint, TangentObject, minkowski
from beamlab.wave_forward import WaveProblem


@pytest.fixture
def flat() -> MetricSpec:
    """1+1 Minkowski on [0, 2] x [0, 1]"""
    return minkowski(1, 2.0, Interval(1.0))


@pytest.fixture
def lattice(flat: MetricSpec) -> Lattice:
    # CFL 0.5
    return Lattice.for_metric(flat, 128, 32)


@pytest.fixture
def problem(flat: MetricSpec, lattice: Lattice) -> WaveProblem:
    return WaveProblem(flat, lattice)


@pytest.fixture
def boundary_cfg() -> BoundaryConfig:
    return BoundaryConfig(center=1.0, width=0.4)


@pytest.fixture
def through(flat: MetricSpec):
    """Unbroken null segment through (1, 1/2), wall to wall"""
    from beamlab.causal_geom import shoot_null_geodesic

    p = SpacetimePoint.of([1.0, 0.5])
    geodesic = shoot_null_geodesic(flat, p, TangentObject(p, np.array([1.0, 1.0])), max_reflections=0)
    return geodesic.through_segment()


@pytest.fixture
def write_config(tmp_path: Path):
    """Write a small 1+1 run config and return its path"""

    def write(**sections) -> Path:
        data = {
            "metric": {"kind": "minkowski", "n": 1, "T": 1.0},
            "lattice": {"nt": 64, "nx": 32},
            "solver": {"refinements": 0},
        }
        for key, value in sections.items():
            data[key] = {**data.get(key, {}), **value} if isinstance(value, dict) else value
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump(data))
        return path

    return write
