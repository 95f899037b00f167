"""Architecture and training configuration, with the unified defaults used throughout."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

AGGREGATION_KINDS = ("special_token", "average_pooling", "router")
ROUTER_COUNTS = (3, 6, 12)

SHORT_TERM = "short-term forecasting"
LONG_TERM = "long-term forecasting"

# Prediction lengths covered by one long-term run matrix (one model per length).
LONG_TERM_HORIZONS = (96, 192, 336, 720)

# Hyperparameter search grids; sweep orchestration is manual.
SEARCH_GRIDS = {
    "e_layers": (1, 2, 3),
    "d_model": (128, 256, 512),
    "d_ff": (512, 1024, 2048),
    "n_heads": (4, 8, 16),
    "batch_size": (16, 32, 64, 128),
    "dropout": (0.0, 0.1, 0.2, 0.3),
}


@dataclass(frozen=True)
class AggregationStrategy:
    """How word-level text tokens collapse into one global token per paragraph."""

    kind: str = "average_pooling"
    router_count: int = 3

    def __post_init__(self):
        if self.kind not in AGGREGATION_KINDS:
            raise ValueError(f"unknown aggregation kind {self.kind!r}, expected one of {AGGREGATION_KINDS}")
        if self.kind == "router" and self.router_count not in ROUTER_COUNTS:
            raise ValueError(f"router_count must be one of {ROUTER_COUNTS}, got {self.router_count}")

    @property
    def trainable(self) -> bool:
        return self.kind == "router"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "router_count": self.router_count}

    @classmethod
    def from_dict(cls, d: dict) -> "AggregationStrategy":
        return cls(kind=d.get("kind", "average_pooling"), router_count=d.get("router_count", 3))


@dataclass
class ModelConfig:
    """All architecture and training hyperparameters for one run.

    Defaults are the unified short-term values (three encoder layers, 256-d model,
    2048-d feed-forward, 8 heads, patch length 24, lr 1e-4, batch 32, 10 epochs).
    ``long_term_config`` switches to the long-term patch length of 12.
    """

    e_layers: int = 3
    d_model: int = 256
    d_ff: int = 2048
    n_heads: int = 8
    patch_len: int = 24
    patch_stride: int | None = None  # must equal patch_len (non-overlapping patches)
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    dropout: float = 0.1
    input_len: int = 168
    output_len: int = 24
    task_kind: str = SHORT_TERM
    aggregation: AggregationStrategy = field(default_factory=AggregationStrategy)
    drop_endo: bool = False
    drop_exo: bool = False
    drop_meta: bool = False

    def __post_init__(self):
        if self.patch_stride is None:
            self.patch_stride = self.patch_len
        if self.patch_stride != self.patch_len:
            raise ValueError("patch_stride must equal patch_len: patches are non-overlapping")
        for name in ("e_layers",):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("d_model", "d_ff", "n_heads", "patch_len", "batch_size", "input_len", "output_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if isinstance(self.aggregation, dict):
            self.aggregation = AggregationStrategy.from_dict(self.aggregation)
        if self.drop_endo and self.drop_exo and self.drop_meta:
            raise ValueError("cannot drop endogenous, exogenous, and metadata tokens all at once")

    @property
    def ablation_flags(self) -> tuple[str, ...]:
        flags = []
        if self.drop_endo:
            flags.append("drop_endo")
        if self.drop_exo:
            flags.append("drop_exo")
        if self.drop_meta:
            flags.append("drop_meta")
        return tuple(flags)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["aggregation"] = self.aggregation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def replace(self, **changes) -> "ModelConfig":
        if "patch_len" in changes and "patch_stride" not in changes:
            changes["patch_stride"] = changes["patch_len"]
        return dataclasses.replace(self, **changes)


def short_term_config(**overrides) -> ModelConfig:
    """Unified short-term setup: 168-step look-back, 24-step horizon, patch length 24."""
    return ModelConfig().replace(**overrides) if overrides else ModelConfig()


def long_term_config(output_len: int = 96, **overrides) -> ModelConfig:
    """Unified long-term setup: 96-step look-back, patch length 12."""
    cfg = ModelConfig(
        patch_len=12,
        patch_stride=12,
        input_len=96,
        output_len=output_len,
        task_kind=LONG_TERM,
    )
    return cfg.replace(**overrides) if overrides else cfg


def long_term_run_matrix(base: ModelConfig | None = None) -> dict[int, ModelConfig]:
    """One config per long-term prediction length; joint runs train one model each."""
    base = base if base is not None else long_term_config()
    return {s: base.replace(output_len=s) for s in LONG_TERM_HORIZONS}
