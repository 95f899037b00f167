"""Multi-level metadata rendering: dataset, task, and sample paragraphs.

Rendering is deterministic and versioned: any wording change must bump
``TEMPLATE_VERSION`` so cached text embeddings are invalidated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .data import DatasetDescriptor

TEMPLATE_VERSION = "template_v1"

META_LEVELS = ("dataset", "task", "sample")
N_META_LEVELS = 3

DATASET_TEMPLATE = (
    "This is a time series dataset named {name} from the {domain} domain, "
    "sampled every {frequency}. Exogenous series describe "
    "{exogenous_descriptions}. {source_note}"
)

TASK_TEMPLATE = (
    "This is a {task_kind} task: predict the future {output_length} steps of "
    "{target_name} from the previous {input_length} steps of history."
)

SAMPLE_TEMPLATE = (
    "This sample starts at {start}. Over the input window the target series "
    "has mean {mean}, standard deviation {std}, minimum {min}, and maximum {max}."
)

SAMPLE_TEMPLATE_BASIC = (
    "This sample starts at {start}. Over the input window the target series "
    "has mean {mean} and standard deviation {std}."
)


@dataclass(frozen=True)
class TaskDescriptor:
    """What one forecasting task asks for: target, window lengths, task kind."""

    target_name: str
    input_length: int
    output_length: int
    task_kind: str

    def __post_init__(self):
        if self.input_length <= 0:
            raise ValueError(f"input_length must be positive, got {self.input_length}")
        if self.output_length <= 0:
            raise ValueError(f"output_length must be positive, got {self.output_length}")
        if not self.target_name:
            raise ValueError("target_name must be non-empty")
        if not self.task_kind:
            raise ValueError("task_kind must be non-empty")


@dataclass(frozen=True)
class SampleStats:
    """Summary statistics of one sample's raw endogenous history."""

    start_timestamp: datetime
    mean: float
    std: float
    min: float
    max: float

    def __post_init__(self):
        values = (self.mean, self.std, self.min, self.max)
        if any(not math.isfinite(v) for v in values):
            raise ValueError(f"sample statistics must be finite, got {values}")
        if self.std < 0:
            raise ValueError(f"std must be non-negative, got {self.std}")
        if not (self.min <= self.mean <= self.max):
            raise ValueError(f"need min <= mean <= max, got {self.min}, {self.mean}, {self.max}")

    @classmethod
    def from_history(cls, history: np.ndarray, start_timestamp: datetime) -> "SampleStats":
        """Population statistics over a raw endogenous history."""
        arr = np.asarray(history, dtype=np.float64)
        if arr.size == 0:
            raise ValueError("cannot summarize an empty history")
        return cls(
            start_timestamp=start_timestamp,
            mean=float(arr.mean()),
            std=float(arr.std()),
            min=float(arr.min()),
            max=float(arr.max()),
        )


@dataclass(frozen=True)
class MetadataBundle:
    """The three rendered metadata paragraphs, in fixed (dataset, task, sample) order."""

    dataset_text: str
    task_text: str
    sample_text: str

    def __post_init__(self):
        for level, text in zip(META_LEVELS, self.texts):
            if not text:
                raise ValueError(f"{level}-level metadata text is empty")

    @property
    def texts(self) -> tuple[str, str, str]:
        return (self.dataset_text, self.task_text, self.sample_text)

    @property
    def level_count(self) -> int:
        return N_META_LEVELS


def _require(value: str, field_name: str) -> str:
    if not value or not str(value).strip():
        raise ValueError(f"metadata field {field_name!r} is empty; no silent blanks in templates")
    return str(value)


def render_dataset_text(descriptor: DatasetDescriptor) -> str:
    """Dataset-level paragraph: domain, sampling frequency, exogenous meaning, source."""
    return DATASET_TEMPLATE.format(
        name=_require(descriptor.name, "name"),
        domain=_require(descriptor.domain, "domain"),
        frequency=_require(descriptor.frequency, "frequency"),
        exogenous_descriptions=_require(descriptor.exogenous_descriptions, "exogenous_descriptions"),
        source_note=_require(descriptor.source_note, "source_note"),
    )


def render_task_text(task: TaskDescriptor) -> str:
    """Task-level paragraph: target of interest, input/output lengths, task kind."""
    return TASK_TEMPLATE.format(
        task_kind=_require(task.task_kind, "task_kind"),
        target_name=_require(task.target_name, "target_name"),
        input_length=task.input_length,
        output_length=task.output_length,
    )


def format_stat(value: float) -> str:
    """Canonical numeric formatting inside sample paragraphs: 4 decimal places."""
    if not math.isfinite(value):
        raise ValueError(f"cannot render non-finite statistic {value!r}")
    return f"{value:.4f}"


def render_sample_text(stats: SampleStats, include_extrema: bool = True) -> str:
    """Sample-level paragraph: start timestamp plus dynamic statistics.

    min/max are an extension beyond the core mean/std pair; pass
    ``include_extrema=False`` to drop them.
    """
    fields = {
        "start": stats.start_timestamp.isoformat(),
        "mean": format_stat(stats.mean),
        "std": format_stat(stats.std),
    }
    if not include_extrema:
        return SAMPLE_TEMPLATE_BASIC.format(**fields)
    fields["min"] = format_stat(stats.min)
    fields["max"] = format_stat(stats.max)
    return SAMPLE_TEMPLATE.format(**fields)


def meta_parse(
    descriptor: DatasetDescriptor,
    task: TaskDescriptor,
    stats: SampleStats,
    include_extrema: bool = True,
) -> MetadataBundle:
    """Render the three metadata paragraphs for one sample."""
    return MetadataBundle(
        dataset_text=render_dataset_text(descriptor),
        task_text=render_task_text(task),
        sample_text=render_sample_text(stats, include_extrema=include_extrema),
    )


def canonical_templates() -> dict[str, str]:
    """The versioned template strings, keyed for audit dumps."""
    return {
        "template_version": TEMPLATE_VERSION,
        "dataset": DATASET_TEMPLATE,
        "task": TASK_TEMPLATE,
        "sample": SAMPLE_TEMPLATE,
        "sample_basic": SAMPLE_TEMPLATE_BASIC,
    }
