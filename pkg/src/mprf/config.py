"""Pipeline configuration: dataclass defaults plus a TOML loader.

Every tunable named by the engine has a default here; a config file only
overrides what it mentions.  Unknown sections or keys are errors so typos
fail loudly (the CLI maps them to exit code 2).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from mprf.overlap import OverlapParams, TripletSpec
from mprf.registration import RansacConfig


class ConfigError(ValueError):
    """The config file is missing, unparsable, or names unknown keys."""


@dataclass(frozen=True)
class AggregationConfig:
    clusters: int = 64
    projected_dim: int = 128
    sinkhorn_iterations: int = 3
    sinkhorn_temperature: float = 1.0
    dustbin_marginal: str = "uniform"
    bank_path: Optional[str] = None
    bank_seed: int = 0
    bank_sample_limit: int = 100_000


@dataclass(frozen=True)
class RetrievalConfig:
    shortlist_size: int = 20       # stage-1 candidates (n1)
    rerank_size: int = 10          # stage-2 output (n2)
    exclusion_window_s: float = 30.0
    mode: str = "exact"
    ivf_lists: Optional[int] = None  # default: round(sqrt(N))
    ivf_probe: int = 4


@dataclass(frozen=True)
class FusionConfig:
    similarity_threshold: float = 0.90
    threshold_before_assignment: bool = False
    patch_rows: int = 16
    patch_cols: int = 16


@dataclass(frozen=True)
class IcpConfig:
    enabled: bool = False
    max_corr_dist: float = 0.1
    max_iters: int = 30


@dataclass(frozen=True)
class PipelineConfig:
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    overlap: OverlapParams = field(default_factory=OverlapParams)
    triplets: TripletSpec = field(default_factory=TripletSpec)
    seed: int = 0
    # Candidate ordering after registration: by estimated pose distance
    # (default) or by inlier count.
    rerank_mode: str = "pose_distance"

    def __post_init__(self) -> None:
        if self.rerank_mode not in ("pose_distance", "inlier_count"):
            raise ValueError(f"unknown rerank_mode {self.rerank_mode!r}")


_SECTIONS = {
    "aggregation": AggregationConfig,
    "retrieval": RetrievalConfig,
    "fusion": FusionConfig,
    "ransac": RansacConfig,
    "icp": IcpConfig,
    "overlap": OverlapParams,
    "triplets": TripletSpec,
}


def _build_section(name: str, cls, values: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def load_config(path) -> PipelineConfig:
    """Parse a TOML config file into a PipelineConfig."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    sections = {}
    top = {}
    for key, value in data.items():
        if key == "seed":
            if not isinstance(value, int):
                raise ConfigError("seed must be an integer")
            top["seed"] = value
        elif key == "rerank_mode":
            top["rerank_mode"] = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            sections[key] = _build_section(key, _SECTIONS[key], value)
        else:
            raise ConfigError(f"unknown config section or key: {key}")
    try:
        return PipelineConfig(**top, **sections)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dump_default_config() -> str:
    """TOML text listing every setting at its default value."""
    lines = ["seed = 0", 'rerank_mode = "pose_distance"', ""]
    defaults = PipelineConfig()
    for name, cls in _SECTIONS.items():
        lines.append(f"[{name}]")
        for f in dataclasses.fields(cls):
            value = getattr(getattr(defaults, name), f.name)
            if value is None:
                lines.append(f"# {f.name} = <unset>")
            elif isinstance(value, bool):
                lines.append(f"{f.name} = {'true' if value else 'false'}")
            elif isinstance(value, str):
                lines.append(f'{f.name} = "{value}"')
            else:
                lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)
