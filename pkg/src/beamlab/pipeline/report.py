"""Run manifests and console summaries"""

from dataclasses import dataclass, field
import hashlib
from importlib.metadata import PackageNotFoundError, version
import logging
from pathlib import Path
from typing import Any

from beamlab.lib.const import EXIT_PASS, EXIT_VERDICT_FAILED
from beamlab.lib.rich import Table, console
from beamlab.pipeline.type import Artifacts, VerdictRecord

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.yaml"


def software_version() -> str:
    try:
        return version("beamlab")
    except PackageNotFoundError:
        return "unknown"


def sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    pipeline: str
    config_hash: str
    seed: int
    thresholds: dict[str, float] = field(default_factory=dict)
    verdicts: list[VerdictRecord] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    files: list[Path] = field(default_factory=list)
    software_version: str = field(default_factory=software_version)

    @property
    def failed(self) -> list[VerdictRecord]:
        return [v for v in self.verdicts if v.verdict == "fail"]

    @property
    def exit_code(self) -> int:
        """0 when every verdict passed or was skipped"""
        return EXIT_VERDICT_FAILED if self.failed else EXIT_PASS

    def to_dict(self, root: Path) -> dict[str, Any]:
        return {
            "pipeline": self.pipeline,
            "software_version": self.software_version,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "thresholds": self.thresholds,
            "verdicts": [{"name": v.name, "verdict": v.verdict, "detail": v.detail} for v in self.verdicts],
            "timings": {stage: round(seconds, 6) for stage, seconds in self.timings.items()},
            "files": [{"path": str(p.relative_to(root)), "sha256": sha256(p)} for p in self.files],
        }


def emit_report(manifest: RunManifest, artifacts: Artifacts) -> Path:
    """Write the manifest listing every emitted file and print the verdict table"""
    manifest.files = sorted(artifacts.paths)
    path = artifacts.path(MANIFEST_NAME)
    artifacts.yaml(MANIFEST_NAME, manifest.to_dict(artifacts.root))

    table = Table(title=f"{manifest.pipeline} verdicts", title_style="header")
    table.add_column("check")
    table.add_column("verdict")
    table.add_column("detail", style="secondary")
    for v in manifest.verdicts:
        table.add_row(v.name, f"[{v.verdict}]{v.verdict}[/{v.verdict}]", v.detail)
    console.print(table)
    for stage, seconds in manifest.timings.items():
        logger.info("stage %s took %.2f s", stage, seconds)
    return path
