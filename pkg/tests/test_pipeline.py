from pathlib import Path

import pytest
import yaml

from beamlab.lib.config import load_config
from beamlab.lib.errors import ConfigValidationError, OutputError
from beamlab.lattice import Lattice
from beamlab.lib.config import BoundaryConfig
from beamlab.pipeline import Artifacts, Pipeline, RunManifest, VerdictRecord, run_scenario
from beamlab.pipeline.compare import uniqueness_compare
from beamlab.reconstruction import FieldReport
from beamlab.wave_forward import NonlinearitySpec, WaveProblem, boundary_battery, gamma_mask


def test_every_subcommand_has_a_pipeline():
    assert set(Pipeline.registered) == {"trace", "beam-verify", "forward", "dtn", "linearize", "reconstruct", "compare"}


def test_artifacts_need_a_writable_directory(tmp_path: Path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OutputError):
        Artifacts.prepare(blocker)


def test_csv_keeps_full_precision(tmp_path: Path):
    artifacts = Artifacts.prepare(tmp_path / "out")
    path = artifacts.csv("values.csv", ["name", "value"], [["a", 0.1], ["b", 3]])
    assert path.read_text() == "name,value\na,0.10000000000000001\nb,3\n"
    assert artifacts.paths == [path]


def test_manifest_exit_code():
    manifest = RunManifest("forward", "abc", 0, verdicts=[VerdictRecord("a", "pass"), VerdictRecord("b", "skipped")])
    assert manifest.exit_code == 0
    manifest.verdicts.append(VerdictRecord("c", "fail"))
    assert manifest.exit_code == 1
    assert [v.name for v in manifest.failed] == ["c"]


def test_a_pipeline_must_be_named(write_config, tmp_path: Path):
    config = load_config(write_config(), environ={})
    with pytest.raises(ConfigValidationError):
        run_scenario(config, tmp_path / "out")


def test_forward_pipeline(write_config, tmp_path: Path):
    config = load_config(write_config(pipeline="forward"), environ={})
    out = tmp_path / "out"
    manifest = run_scenario(config, out)

    verdicts = {v.name: v.verdict for v in manifest.verdicts}
    assert verdicts == {"picard_contraction": "pass", "convergence_order": "skipped"}
    assert manifest.exit_code == 0

    written = yaml.safe_load((out / "manifest.yaml").read_text())
    assert written["config_hash"] == config.digest()
    assert {"config.yaml", "picard.csv", "energy.csv", "solution.bin"} <= {f["path"] for f in written["files"]}
    assert all(len(f["sha256"]) == 64 for f in written["files"])
    assert yaml.safe_load((out / "config.yaml").read_text())["pipeline"] == "forward"


@pytest.mark.slow
def test_trace_pipeline(write_config, tmp_path: Path):
    config = load_config(
        write_config(pipeline="trace", beam={"N": 1, "start": [0.1, 0.5], "chart_radius": 0.25, "chart_margin": 0.1, "s_nodes": 101}),
        environ={},
    )
    manifest = run_scenario(config, tmp_path / "out")
    verdicts = {v.name: v.verdict for v in manifest.verdicts}
    assert verdicts["null_defect"] == "pass"
    assert verdicts["null_convex"] == "pass"
    assert verdicts["recoverable_set"] == "pass"
    assert (tmp_path / "out" / "geodesic.csv").exists()


def test_uniqueness_compare(problem: WaveProblem, lattice: Lattice, boundary_cfg: BoundaryConfig):
    mask = gamma_mask(lattice)
    battery = boundary_battery(lattice, boundary_cfg.model_copy(update={"amplitude": 0.1}), mask)[:2]
    empty = FieldReport(lattice, [])
    cubic = NonlinearitySpec({3: "1"})
    same = uniqueness_compare(problem, cubic, NonlinearitySpec({3: "1"}), battery, mask, lambda: empty)
    assert same.discrepancy == 0
    assert same.scale > 0
    assert same.estimate_norm == 0
    assert same.reconstruction is empty
    other = uniqueness_compare(problem, cubic, NonlinearitySpec({3: "2"}), battery, mask, lambda: empty)
    assert len(other.discrepancies) == 2
    assert other.discrepancy > 0


def verdicts_of(manifest: RunManifest) -> dict[str, str]:
    return {v.name: v.verdict for v in manifest.verdicts}


FLAT_BEAM = {"N": 1, "rho_list": [1.0, 2.0, 3.0, 4.0], "start": [0.1, 0.5], "chart_radius": 0.25, "chart_margin": 0.1, "s_nodes": 101}


@pytest.mark.slow
def test_beam_verify_pipeline(write_config, tmp_path: Path):
    config = load_config(write_config(pipeline="beam-verify", beam=FLAT_BEAM), environ={})
    out = tmp_path / "out"
    verdicts = verdicts_of(run_scenario(config, out))
    assert verdicts["riccati_invariant"] == "pass"
    assert verdicts["eikonal_defect_order"] == "pass"
    assert verdicts["transport_defect_order"] == "pass"
    assert verdicts["residual_decay"] == "pass"
    # the geodesic reflects off x = 1 at t = 0.6
    assert "boundary_smallness" in verdicts
    assert "remainder_decay" in verdicts
    assert {"beam_0.yaml", "beam_1.yaml", "residual_decay.csv", "boundary_smallness.csv", "remainder_decay.csv"} <= {p.name for p in out.iterdir()}


@pytest.mark.slow
def test_reconstruct_pipeline(write_config, tmp_path: Path):
    config = load_config(
        write_config(
            pipeline="reconstruct",
            metric={"T": 2.0},
            lattice={"nt": 1024, "nx": 256},
            beam={**FLAT_BEAM, "rho_list": [16.0, 32.0, 64.0, 128.0]},
            reconstruction={"points": [[1.0, 0.5]]},
        ),
        environ={},
    )
    out = tmp_path / "out"
    verdicts = verdicts_of(run_scenario(config, out))
    assert verdicts["recovery"] == "pass"
    assert (out / "reconstruction.csv").exists()
    assert (out / "estimate.bin").exists()


@pytest.mark.slow
def test_compare_pipeline_with_equal_coefficients(write_config, tmp_path: Path):
    config = load_config(
        write_config(
            pipeline="compare",
            beam=FLAT_BEAM,
            nonlinearity_alt={"coefficients": {3: "1"}},
            reconstruction={"points": [[0.5, 0.5]]},
        ),
        environ={},
    )
    out = tmp_path / "out"
    verdicts = verdicts_of(run_scenario(config, out))
    assert verdicts["uniqueness"] == "pass"
    assert "localization" not in verdicts
    assert (out / "discrepancy.csv").exists()


@pytest.mark.slow
def test_linearize_pipeline_checks_greens_identity(write_config, tmp_path: Path):
    config = load_config(
        write_config(
            pipeline="linearize",
            nonlinearity={"coefficients": {3: "1"}},
            nonlinearity_alt={"coefficients": {3: "2"}},
            linearization={"m": 3},
        ),
        environ={},
    )
    out = tmp_path / "out"
    verdicts = verdicts_of(run_scenario(config, out))
    assert verdicts["greens_identity"] == "pass"
    written = yaml.safe_load((out / "greens_identity.yaml").read_text())
    fine = written["fine"]
    assert fine["rhs_outside"] == pytest.approx([a - b for a, b in zip(fine["rhs"], fine["rhs_gamma"])])
    assert fine["lhs"] != [0.0, 0.0]
