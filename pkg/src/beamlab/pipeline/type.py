"""Base class for pipelines.

Each CLI subcommand is a `Pipeline` subclass. Subclasses register themselves
under their subcommand name:

    class Forward(Pipeline, name="forward"):
        def run(self) -> None:
            with self.stage("solve"):
                ...
            self.verdict("picard", "pass", "converged in 4 iterations")

A pipeline records verdicts and stage timings, and writes every artifact
through `self.artifacts` so the manifest can list it.
"""

from collections.abc import Iterable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import cached_property
import csv
import logging
from pathlib import Path
import time
from typing import Any, ClassVar, Self

import numpy as np
import yaml

from beamlab.causal_geom import ReachableSet, reachable_set
from beamlab.lattice import GridField, Lattice
from beamlab.lib.config import RunConfig
from beamlab.lib.errors import OutputError
from beamlab.lib.helpers import format_float
from beamlab.lib.types import BoolArray, Verdict
from beamlab.spacetime import MetricSpec, SpacetimePoint, TangentObject, metric_from_config
from beamlab.wave_forward import NonlinearitySpec, WaveProblem, gamma_mask

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VerdictRecord:
    name: str
    verdict: Verdict
    detail: str = ""


@dataclass
class Artifacts:
    """Files written under the output directory"""

    root: Path
    paths: list[Path] = field(default_factory=list)

    @classmethod
    def prepare(cls, root: Path) -> Self:
        """Create the output directory and make sure it is writable"""
        root = Path(root)
        try:
            root.mkdir(parents=True, exist_ok=True)
            marker = root / ".beamlab-write-test"
            marker.write_text("")
            marker.unlink()
        except OSError as err:
            raise OutputError(root) from err
        return cls(root)

    def add(self, paths: Path | Iterable[Path]) -> None:
        for path in [paths] if isinstance(paths, Path) else paths:
            path = Path(path)
            if path not in self.paths:
                self.paths.append(path)

    def path(self, name: str) -> Path:
        return self.root / name

    def csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """Floats are written with 17 significant digits"""
        path = self.path(name)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_float(v) if isinstance(v, (float, complex, np.floating)) else v for v in row])
        self.add(path)
        return path

    def yaml(self, name: str, data: Any) -> Path:
        path = self.path(name)
        path.write_text(yaml.safe_dump(data, sort_keys=False))
        self.add(path)
        return path

    def grid(self, name: str, field_: GridField) -> list[Path]:
        paths = field_.write(self.path(name))
        self.add(paths)
        return paths

    def mask(self, name: str, lattice: Lattice, mask: BoolArray) -> list[Path]:
        return self.grid(name, GridField(lattice, mask.astype(float)))


class Pipeline:
    """A named run over one configuration"""

    registered: ClassVar[dict[str, type[Self]]] = {}
    name: ClassVar[str]

    def __init_subclass__(cls, name: str | None = None, **kwargs):
        super().__init_subclass__(**kwargs)
        if name is None:
            return
        cls.name = name
        Pipeline.registered[name] = cls

    def __init__(self, config: RunConfig, artifacts: Artifacts):
        self.config = config
        self.artifacts = artifacts
        self.verdicts: list[VerdictRecord] = []
        self.timings: dict[str, float] = {}
        self.rng = np.random.default_rng(config.seed)

    @classmethod
    def get(cls, name: str) -> type["Pipeline"]:
        return cls.registered[name]

    def run(self) -> None:
        raise NotImplementedError

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        logger.info("%s: %s", self.name, name)
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    def verdict(self, name: str, verdict: Verdict, detail: str = "") -> VerdictRecord:
        record = VerdictRecord(name, verdict, detail)
        self.verdicts.append(record)
        log = logger.warning if verdict == "skipped" else logger.info
        log("verdict %s: %s %s", name, verdict, detail)
        return record

    def check(self, name: str, passed: bool, detail: str = "") -> VerdictRecord:
        return self.verdict(name, "pass" if passed else "fail", detail)

    # shared setup

    @cached_property
    def spec(self) -> MetricSpec:
        return metric_from_config(self.config.metric)

    @cached_property
    def lattice(self) -> Lattice:
        return Lattice.from_config(self.config.lattice, self.spec)

    @cached_property
    def problem(self) -> WaveProblem:
        return WaveProblem(self.spec, self.lattice)

    @cached_property
    def gamma(self) -> BoolArray:
        return gamma_mask(self.lattice, self.config.boundary.gamma)

    @cached_property
    def reach(self) -> ReachableSet:
        return reachable_set(self.spec, self.lattice)

    @cached_property
    def nonlinearities(self) -> tuple[NonlinearitySpec, NonlinearitySpec | None]:
        first = NonlinearitySpec.from_config(self.config.nonlinearity)
        alt = self.config.nonlinearity_alt
        return first, None if alt is None else NonlinearitySpec.from_config(alt)

    def start_direction(self) -> tuple[SpacetimePoint, TangentObject]:
        """Start point and the null vector with the configured spatial direction and time orientation"""
        p = SpacetimePoint.of(self.config.beam.start)
        coords = p.as_array()
        beta, g0 = self.spec.fields(coords)
        direction = np.asarray(self.config.beam.direction, dtype=float)
        spatial = direction[1:] / np.sqrt(direction[1:] @ g0 @ direction[1:] / beta)
        vector = np.concatenate([[np.sign(direction[0]) or 1.0], spatial])
        return p, TangentObject(p, vector, "vector")
