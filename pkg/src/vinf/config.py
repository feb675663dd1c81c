"""Flat ``key = value`` run configuration.

Lines starting with ``#`` are comments. The canonical form (sorted
``key=value`` lines) is what the TCP handshake digests.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .clip import ClipPlan
from .errors import ConfigError
from .pipeline import DenoiseConfig, ModelConfig
from .temporal import DualScopeConfig
from .tensor import fnv1a64


@dataclass(frozen=True)
class RunConfig:
    frames: int = 64
    height: int = 4
    width: int = 4
    channels: int = 8
    workers: int = 1
    blocks: int = 2
    taps: int = 3
    groups: int = 2
    n_local: int = 16
    n_global: int = 16
    bias: float = 10.0
    t_star: float = 800.0
    steps: int = 30
    weight_seed: int = 0
    seed: int = 0
    transport: str = "inproc"
    listen: str = ""
    out: str = "x0.vinf"
    metrics: str = ""
    validating: bool = False

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]], base: "RunConfig | None" = None) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = dataclasses.asdict(base or cls())
        for key, raw in pairs:
            key, raw = key.strip(), raw.strip()
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}; known: {', '.join(sorted(fields))}")
            values[key] = _coerce(key, raw, type(values[key]))
        return cls(**values)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
            pairs.append(tuple(line.split("=", 1)))
        return cls.from_pairs(pairs, base)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            return cls.from_text(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def with_overrides(self, assignments: Iterable[str]) -> "RunConfig":
        pairs = []
        for a in assignments:
            if "=" not in a:
                raise ConfigError(f"override must be key=value, got {a!r}")
            pairs.append(tuple(a.split("=", 1)))
        return self.from_pairs(pairs, self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def canonical(self) -> str:
        items = dataclasses.asdict(self)
        return "".join(f"{k}={_render(items[k])}\n" for k in sorted(items))

    def digest(self) -> int:
        return fnv1a64(self.canonical())

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.channels)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            blocks=self.blocks, channels=self.channels, taps=self.taps, groups=self.groups,
            dual_scope=DualScopeConfig(self.n_local, self.n_global, self.bias, self.t_star),
            weight_seed=self.weight_seed)

    def denoise_config(self) -> DenoiseConfig:
        return DenoiseConfig(self.steps)

    def validate(self, workers: int | None = None) -> "RunConfig":
        """Check every module-level constraint; raises ConfigError naming the rule."""
        if min(self.dims) < 1:
            raise ConfigError(f"all of frames/height/width/channels must be >= 1, got {self.dims}")
        if self.transport not in ("inproc", "tcp"):
            raise ConfigError(f"transport must be inproc or tcp, got {self.transport!r}")
        model = self.model_config()
        self.denoise_config()
        if self.n_global > self.frames:
            raise ConfigError(f"n_global={self.n_global} exceeds frames={self.frames}")
        plan = ClipPlan(workers or self.workers, self.frames)
        model.check_plan(plan)
        return self


def _coerce(key: str, raw: str, kind: type):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)
