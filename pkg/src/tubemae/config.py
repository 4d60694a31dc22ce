"""INI run configuration: sections map one-to-one onto the typed configs of the other modules."""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import ModelConfig
from .dataio import KINDS
from .errors import ConfigError, ContractError
from .geometry import TubeConfig
from .objectives import LOSS_NAMES, PRESETS, LossConfig
from .pipeline import ClipConfig, EvalConfig, MaskConfig, TrainConfig


@dataclass(frozen=True)
class DataConfig:
    classes: tuple[str, ...] = KINDS
    videos_per_class: int = 20
    frames: int = 24
    points: int = 256
    domain: str = "A"
    noise_sigma: float = 0.01
    train_ratio: float = 0.8
    segmentation_videos: int = 20
    segments: int = 3
    clip_frames: int = 24
    clip_stride: int = 1
    scale_lo: float = 0.9
    scale_hi: float = 1.1

    def clip(self) -> ClipConfig:
        return ClipConfig(self.clip_frames, self.clip_stride, self.scale_lo, self.scale_hi)


@dataclass(frozen=True)
class LossSection:
    tau: float = 0.1
    queue_size: int = 16
    motion_denominator: str = "standard-inclusive"
    objectives: tuple[str, ...] = LOSS_NAMES

    def build(self) -> LossConfig:
        names = self.objectives
        if len(names) == 1 and names[0] in PRESETS:
            names = PRESETS[names[0]]
        return LossConfig(self.tau, self.queue_size, self.motion_denominator, tuple(names))


@dataclass(frozen=True)
class ModelSection:
    width: int = 128
    depth: int = 5
    heads: int = 8
    decoder_depth: int = 4
    decoder_heads: int = 8
    mlp_ratio: int = 4
    in_features: int = 0
    aggregation: str = "literal-sum"
    r_s: float = 0.5
    r_t: int = 3
    n_neighbors: int = 32
    spatial_stride: int = 32
    temporal_stride: int = 2

    def model(self) -> ModelConfig:
        return ModelConfig(self.width, self.depth, self.heads, self.decoder_depth,
                           self.decoder_heads, self.mlp_ratio, self.in_features, self.aggregation)

    def tube(self) -> TubeConfig:
        return TubeConfig(self.r_s, self.r_t, self.n_neighbors, self.spatial_stride,
                          self.temporal_stride)


SECTIONS = {
    "data": DataConfig,
    "model": ModelSection,
    "mask": MaskConfig,
    "loss": LossSection,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    mask: MaskConfig = field(default_factory=MaskConfig)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_overrides(self, overrides: dict[str, dict[str, object]]) -> "RunConfig":
        updated = {}
        for section, values in overrides.items():
            try:
                updated[section] = dataclasses.replace(getattr(self, section), **values)
            except ContractError as exc:
                raise ConfigError(f"[{section}] {exc}") from exc
        return dataclasses.replace(self, **updated)

    def seeded(self, seed: int) -> "RunConfig":
        return self.with_overrides({"train": {"seed": seed}, "eval": {"seed": seed}})


def _convert(text: str, default, key: str):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean for {key}, got {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, tuple):
        return tuple(part.strip() for part in text.split(",") if part.strip())
    return type(default)(text.strip())


def _line_of(text: str, section: str, key: str | None = None) -> int:
    """1-based line of a section header or of a key inside it (0 when not found)."""
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        head = re.match(r"\s*\[([^\]]+)\]", line)
        if head:
            current = head.group(1).strip()
            if key is None and current == section:
                return lineno
            continue
        if key is not None and current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return lineno
    return 0


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    sections = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}:{_line_of(text, name)}: unknown section [{name}]")
        cls = SECTIONS[name]
        defaults = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in parser.items(name):
            line = _line_of(text, name, key)
            if key not in known:
                raise ConfigError(f"{source}:{line}: unknown key {key!r} in [{name}]")
            try:
                values[key] = _convert(raw, getattr(defaults, key), key)
            except ValueError as exc:
                raise ConfigError(f"{source}:{line}: bad value for {name}.{key}: {exc}") from exc
        try:
            sections[name] = cls(**values)
        except (ContractError, TypeError) as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from exc
    return RunConfig(**sections)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path))


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(cfg: RunConfig, comments: list[str] = ()) -> str:
    """Fully resolved config text; parsing it back yields an equal RunConfig."""
    lines = [f"# {c}" for c in comments]
    for name in SECTIONS:
        section = getattr(cfg, name)
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"
