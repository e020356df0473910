from pathlib import Path

import pytest

from beamlab.lib.config import RunConfig, dump_config, environment_overrides, load_config, validate_config
from beamlab.lib.errors import ConfigValidationError


def test_defaults():
    config = validate_config({})
    assert config.pipeline is None
    assert config.metric.kind == "minkowski"
    assert config.nonlinearity.coefficients == {3: "1"}
    assert config.boundary.battery == 4
    assert config.solver.refinements == 2


def test_every_violation_is_reported():
    with pytest.raises(ConfigValidationError) as info:
        validate_config({"lattice": {"nt": 2}, "beam": {"N": 0, "rho_list": []}, "typo": 1})
    fields = {f for f, _ in info.value.violations}
    assert {"lattice.nt", "beam.N", "beam.rho_list", "typo"} <= fields
    assert info.value.exit_code == 2


def test_semantic_checks():
    with pytest.raises(ConfigValidationError) as info:
        validate_config({"metric": {"n": 2}, "nonlinearity": {"coefficients": {7: "1"}, "k_max": 5}})
    fields = {f for f, _ in info.value.violations}
    assert {"metric.domain.shape", "lattice.ny", "beam.start", "beam.direction", "nonlinearity.coefficients"} <= fields


def test_quadratic_nonlinearity_is_rejected():
    with pytest.raises(ConfigValidationError):
        validate_config({"nonlinearity": {"coefficients": {2: "1"}}})


def test_environment_overrides():
    assert environment_overrides({"BEAMLAB_BEAM__N": "7", "BEAMLAB_METRIC__T": "3.5", "HOME": "/root"}) == {
        "beam": {"N": 7},
        "metric": {"T": 3.5},
    }


def test_load_order(tmp_path: Path):
    path = tmp_path / "run.yaml"
    path.write_text("pipeline: forward\nbeam: {N: 3}\nlattice: {nt: 64}\n")
    config = load_config(path, environ={"BEAMLAB_BEAM__N": "5"})
    assert config.pipeline == "forward"
    assert config.beam.N == 5
    assert config.lattice.nt == 64

    config = load_config(path, overrides={"beam": {"N": 2}}, environ={"BEAMLAB_BEAM__N": "5"})
    assert config.beam.N == 2


def test_missing_or_malformed_files(tmp_path: Path):
    with pytest.raises(ConfigValidationError):
        load_config(tmp_path / "absent.yaml", environ={})
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigValidationError):
        load_config(path, environ={})


def test_digest_is_stable():
    a = validate_config({"beam": {"N": 3}})
    b = RunConfig.model_validate(validate_config({"beam": {"N": 3}}).model_dump())
    assert a.digest() == b.digest()
    assert a.digest() != validate_config({"beam": {"N": 4}}).digest()
    assert "N: 3" in dump_config(a)


@pytest.mark.parametrize("name", ["trace", "beam", "forward"])
def test_shipped_run_configs_are_valid(name: str):
    config = load_config(Path(__file__).parents[1] / "runs" / f"{name}.yaml", environ={})
    assert config.pipeline is not None


def test_static_metric_needs_g0():
    with pytest.raises(ConfigValidationError) as info:
        validate_config({"metric": {"kind": "static", "n": 1, "T": 1.0, "beta": "1"}})
    assert ("metric.g0", "required for kind static") in info.value.violations
    assert info.value.exit_code == 2

    with pytest.raises(ConfigValidationError):
        validate_config({"metric": {"kind": "static", "n": 1, "g0": [["1", "0"]]}})
    assert validate_config({"metric": {"kind": "static", "n": 1, "g0": [["1 + x**2"]]}}).metric.g0 == [["1 + x**2"]]


def test_environment_keys_follow_the_schema_case():
    assert environment_overrides({
        "BEAMLAB_METRIC__DOMAIN__SHAPE": "rectangle",
        "BEAMLAB_SOLVER__PICARD_TOL": "1e-8",
        "BEAMLAB_METRIC__N": "2",
        "BEAMLAB_beam__n": "4",
    }) == {
        "metric": {"domain": {"shape": "rectangle"}, "n": 2},
        "solver": {"picard_tol": 1e-8},
        "beam": {"N": 4},
    }
