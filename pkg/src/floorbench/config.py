"""Run configuration: one INI file that travels with every output tree.

Example::

    [run]
    output = out
    seed = 7
    observations_per_scene = 24
    tau = 0.10
    boundary_radius = 7
    k = 4
    ood_sources = procgen_d
    workers = 4

    [procgen]
    count = 10
    source_tags = procgen_a, procgen_b

    [sources]
    scannet = /data/scannet/meshes

    [transforms]
    3rscan = flip_z

Only the worker count and log level may also come from the environment
(``FLOORBENCH_WORKERS``, ``FLOORBENCH_LOG_LEVEL``).
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .baselines import METHODS
from .curation import DEFAULT_FRACTIONS, DEFAULT_TAU
from .metrics import DEFAULT_RADIUS
from .scene import DEFAULT_SOURCE_TRANSFORMS
from .synthesis import DEFAULT_BUDGET

ENV_WORKERS = "FLOORBENCH_WORKERS"
ENV_LOG_LEVEL = "FLOORBENCH_LOG_LEVEL"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    output: Path = Path("out")
    seed: int = 0
    observations_per_scene: int = DEFAULT_BUDGET
    tau: float = DEFAULT_TAU
    boundary_radius: int = DEFAULT_RADIUS
    k: int = 4
    ood_sources: tuple[str, ...] = ()
    workers: int = 1
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    floor_mode: str = "semantic"
    methods: tuple[str, ...] = METHODS
    sources: dict[str, Path] = field(default_factory=dict)
    procgen_count: int = 0
    procgen_tags: tuple[str, ...] = ("procgen",)
    transforms: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_SOURCE_TRANSFORMS))
    log_level: str = "WARNING"

    def __post_init__(self):
        if self.observations_per_scene < 1:
            raise ConfigError("observations_per_scene must be at least 1")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.boundary_radius < 1:
            raise ConfigError("boundary_radius must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions) or sum(self.fractions) <= 0:
            raise ConfigError("fractions must be three non-negative numbers")
        if self.floor_mode not in ("semantic", "height-percentile"):
            raise ConfigError(f"unknown floor_mode {self.floor_mode!r}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods: {', '.join(unknown)}")
        if self.procgen_count < 0:
            raise ConfigError("procgen count must be non-negative")
        if self.procgen_count and not self.procgen_tags:
            raise ConfigError("procgen source_tags must not be empty")

    def recorded(self) -> dict:
        """Seed and thresholds stamped into every manifest line."""
        return {
            "seed": self.seed,
            "tau": self.tau,
            "boundary_radius": self.boundary_radius,
            "observations_per_scene": self.observations_per_scene,
            "k": self.k,
        }

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if "output" in kw:
            kw["output"] = Path(kw["output"])
        try:
            return replace(self, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {
            "output": str(self.output),
            "seed": str(self.seed),
            "observations_per_scene": str(self.observations_per_scene),
            "tau": repr(self.tau),
            "boundary_radius": str(self.boundary_radius),
            "k": str(self.k),
            "ood_sources": ", ".join(self.ood_sources),
            "fractions": ", ".join(repr(f) for f in self.fractions),
            "floor_mode": self.floor_mode,
            "methods": ", ".join(self.methods),
        }
        cp["procgen"] = {"count": str(self.procgen_count), "source_tags": ", ".join(self.procgen_tags)}
        cp["sources"] = {k: str(v) for k, v in sorted(self.sources.items())}
        cp["transforms"] = dict(sorted(self.transforms.items()))
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def _list(value: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in value.replace("\n", ",").split(",") if x.strip())


_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"sources", "transforms", "procgen_count", "procgen_tags", "log_level"}


def parse_config(text: str, base_dir: Path | None = None, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    kw: dict = {}
    try:
        if cp.has_section("run"):
            for key, raw in cp["run"].items():
                if key not in _RUN_KEYS:
                    raise ConfigError(f"unknown [run] key {key!r}")
                if key in ("seed", "observations_per_scene", "boundary_radius", "k", "workers"):
                    kw[key] = int(raw)
                elif key == "tau":
                    kw[key] = float(raw)
                elif key == "fractions":
                    kw[key] = tuple(float(x) for x in _list(raw))
                elif key in ("ood_sources", "methods"):
                    kw[key] = _list(raw)
                elif key == "output":
                    kw[key] = Path(raw)
                else:
                    kw[key] = raw.strip()
        if cp.has_section("procgen"):
            sec = cp["procgen"]
            kw["procgen_count"] = int(sec.get("count", "0"))
            if "source_tags" in sec:
                kw["procgen_tags"] = _list(sec["source_tags"])
        if cp.has_section("sources"):
            kw["sources"] = {tag: Path(p) for tag, p in cp["sources"].items()}
        transforms = dict(DEFAULT_SOURCE_TRANSFORMS)
        if cp.has_section("transforms"):
            transforms.update(dict(cp["transforms"].items()))
        kw["transforms"] = transforms
        if ENV_WORKERS in environ and environ[ENV_WORKERS].strip():
            kw["workers"] = int(environ[ENV_WORKERS])
        if ENV_LOG_LEVEL in environ:
            kw["log_level"] = environ[ENV_LOG_LEVEL].upper()
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from exc
    if base_dir is not None:
        if "output" in kw and not kw["output"].is_absolute():
            kw["output"] = base_dir / kw["output"]
        if "sources" in kw:
            kw["sources"] = {t: p if p.is_absolute() else base_dir / p for t, p in kw["sources"].items()}
    return RunConfig(**kw)


def load_config(path: str | Path | None, environ=None) -> RunConfig:
    if path is None:
        return parse_config("", environ=environ)
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent, environ=environ)
