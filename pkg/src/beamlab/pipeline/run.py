from pathlib import Path
import logging

from beamlab.lib.config import RunConfig, dump_config
from beamlab.lib.const import CFL_MAX, NODES_PER_EFOLD
from beamlab.lib.errors import ConfigValidationError
from beamlab.lib.helpers import check_type
from beamlab.pipeline.report import RunManifest, emit_report
from beamlab.pipeline.type import Artifacts, Pipeline

logger = logging.getLogger(__name__)


def thresholds(config: RunConfig) -> dict[str, float]:
    return {
        "cfl_max": CFL_MAX,
        "nodes_per_efold": NODES_PER_EFOLD,
        "picard_tol": config.solver.picard_tol,
        "phase_value_tol": config.reconstruction.s_tol,
        "phase_gradient_tol": config.reconstruction.grad_tol,
        "eps_step": config.linearization.eps_step,
    }


def run_scenario(config: RunConfig, out: Path, pipeline: str | None = None) -> RunManifest:
    """Run the named (or configured) pipeline and write its report under `out`"""
    config = check_type(config, RunConfig, "config")
    name = pipeline or config.pipeline
    if name is None:
        raise ConfigValidationError([("pipeline", "no pipeline named on the command line or in the config")])
    artifacts = Artifacts.prepare(out)
    artifacts.add(artifacts.path("config.yaml"))
    artifacts.path("config.yaml").write_text(dump_config(config))

    runner = Pipeline.get(name)(config, artifacts)
    logger.info("running %s (config %s)", name, config.digest()[:12])
    runner.run()

    manifest = RunManifest(
        pipeline=name,
        config_hash=config.digest(),
        seed=config.seed,
        thresholds=thresholds(config),
        verdicts=runner.verdicts,
        timings=runner.timings,
    )
    emit_report(manifest, artifacts)
    return manifest
