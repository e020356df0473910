"""One registered pipeline per CLI subcommand"""

from beamlab.pipeline import beam_verify, compare, dtn, forward, linearize, reconstruct, trace  # noqa: F401
from beamlab.pipeline.report import RunManifest, emit_report
from beamlab.pipeline.run import run_scenario
from beamlab.pipeline.type import Artifacts, Pipeline, VerdictRecord

__all__ = ["Artifacts", "Pipeline", "RunManifest", "VerdictRecord", "emit_report", "run_scenario"]
