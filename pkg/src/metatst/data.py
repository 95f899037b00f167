"""CSV ingestion, train/val/test splitting, normalization, and windowing.

Conventions: the first CSV column is named ``date`` and holds timestamps, all
remaining columns are numeric variates, and the endogenous series is the last
column. Validation and test segments are prefixed with the final look-back rows
of the preceding segment so every target row gets a full input window, and all
segments are z-scored with statistics from the training rows only.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterator

import numpy as np

logger = logging.getLogger(__name__)


class CsvParseError(ValueError):
    """A CSV file violated the expected layout; the message names the offending cell."""


class SplitError(ValueError):
    """A split produced a segment too short to hold a single window."""


def parse_timestamp(text: str) -> datetime:
    """Parse ISO-8601 / ``YYYY-MM-DD HH:MM:SS`` timestamps; reject anything else."""
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError as exc:
        raise CsvParseError(f"unparseable timestamp {text!r}: {exc}") from None


@dataclass(frozen=True)
class DatasetDescriptor:
    """Static description of one benchmark dataset."""

    name: str
    domain: str
    frequency: str
    variate_names: tuple[str, ...]
    endogenous_name: str
    exogenous_descriptions: str
    source_note: str = ""

    def __post_init__(self):
        if not self.variate_names:
            raise ValueError(f"dataset {self.name!r} has no variates")
        if len(set(self.variate_names)) != len(self.variate_names):
            raise ValueError(f"dataset {self.name!r} has duplicate variate names")
        if self.endogenous_name != self.variate_names[-1]:
            raise ValueError(
                f"endogenous variate {self.endogenous_name!r} must be the last column, "
                f"got columns {list(self.variate_names)}"
            )

    @property
    def exogenous_names(self) -> tuple[str, ...]:
        return self.variate_names[:-1]

    @property
    def n_exogenous(self) -> int:
        return len(self.variate_names) - 1


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test boundary rule: fractional ratios or fixed row counts."""

    train_ratio: float = 0.7
    val_ratio: float = 0.1
    test_ratio: float = 0.2
    border_mode: str = "ratio"
    fixed_rows: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.border_mode not in ("ratio", "fixed_rows"):
            raise ValueError(f"unknown border_mode {self.border_mode!r}")
        if self.border_mode == "ratio":
            ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
            if any(r <= 0 for r in ratios):
                raise ValueError(f"split ratios must be positive, got {ratios}")
            if abs(sum(ratios) - 1.0) > 1e-9:
                raise ValueError(f"split ratios must sum to 1, got {ratios}")
        else:
            if self.fixed_rows is None or len(self.fixed_rows) != 3:
                raise ValueError("fixed_rows mode requires three row counts")
            if any(r <= 0 for r in self.fixed_rows):
                raise ValueError(f"fixed row counts must be positive, got {self.fixed_rows}")

    @classmethod
    def ratio(cls, train: float, val: float, test: float) -> "SplitSpec":
        total = train + val + test
        return cls(train / total, val / total, test / total)

    @classmethod
    def fixed(cls, train_rows: int, val_rows: int, test_rows: int) -> "SplitSpec":
        return cls(border_mode="fixed_rows", fixed_rows=(train_rows, val_rows, test_rows))

    def borders(self, n_rows: int) -> tuple[int, int, int]:
        """Row indices (train_end, val_end, test_end) before look-back prefixing."""
        if self.border_mode == "fixed_rows":
            train_rows, val_rows, test_rows = self.fixed_rows
            end = train_rows + val_rows + test_rows
            if end > n_rows:
                raise SplitError(f"fixed split needs {end} rows, table has {n_rows}")
            return train_rows, train_rows + val_rows, end
        n_train = int(n_rows * self.train_ratio)
        n_test = int(n_rows * self.test_ratio)
        n_val = n_rows - n_train - n_test
        if min(n_train, n_val, n_test) <= 0:
            raise SplitError(f"table with {n_rows} rows too small for ratio split")
        return n_train, n_train + n_val, n_rows

    def to_json(self):
        if self.border_mode == "fixed_rows":
            return {"fixed_rows": list(self.fixed_rows)}
        return [self.train_ratio, self.val_ratio, self.test_ratio]

    @classmethod
    def from_json(cls, value) -> "SplitSpec":
        if isinstance(value, dict):
            if "fixed_rows" in value:
                return cls.fixed(*value["fixed_rows"])
            return cls.ratio(value["train"], value["val"], value["test"])
        if isinstance(value, (list, tuple)) and len(value) == 3:
            return cls.ratio(*value)
        raise ValueError(f"unrecognized split spec {value!r}")


@dataclass
class RawTable:
    """Parsed CSV: timestamps plus a float matrix with named columns."""

    timestamps: list[datetime]
    values: np.ndarray  # (n_rows, n_variates) float64
    columns: tuple[str, ...]

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_variates(self) -> int:
        return self.values.shape[1]

    def with_endogenous(self, name: str) -> "RawTable":
        """Reorder columns so ``name`` becomes the (endogenous) last column."""
        if name not in self.columns:
            raise ValueError(f"no column named {name!r} in {list(self.columns)}")
        if name == self.columns[-1]:
            return self
        order = [i for i, c in enumerate(self.columns) if c != name]
        order.append(self.columns.index(name))
        return RawTable(
            timestamps=self.timestamps,
            values=self.values[:, order],
            columns=tuple(self.columns[i] for i in order),
        )


@dataclass
class NormalizationStats:
    """Per-variate mean and standard deviation from the training split only."""

    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray  # bool mask of variates whose raw std was 0
    columns: tuple[str, ...]

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def denormalize_endogenous(self, values: np.ndarray) -> np.ndarray:
        return values * self.std[-1] + self.mean[-1]


@dataclass
class Segment:
    """One contiguous split of a dataset, in both raw and normalized form."""

    dataset_id: str
    split: str  # train | val | test
    timestamps: list[datetime]
    raw: np.ndarray  # (n_rows, n_variates) float64
    normalized: np.ndarray  # same shape, z-scored with train stats

    @property
    def n_rows(self) -> int:
        return self.raw.shape[0]

    @property
    def n_variates(self) -> int:
        return self.raw.shape[1]


@dataclass(frozen=True)
class TimeWindowSample:
    """One training example: endogenous history, exogenous histories, target future.

    ``x_en``/``x_ex``/``y_en`` are in normalized space; ``x_en_raw`` keeps the raw
    endogenous history for sample-level metadata statistics.
    """

    x_en: np.ndarray  # (t_en,) float32
    x_ex: np.ndarray  # (t_ex, n_exo) float32
    y_en: np.ndarray  # (s,) float32
    start_timestamp: datetime
    target_start_timestamp: datetime
    dataset_id: str
    x_en_raw: np.ndarray  # (t_en,) float64


def load_csv(path: str | Path, descriptor: DatasetDescriptor | None = None,
             timestamp_column: str = "date") -> RawTable:
    """Parse a benchmark CSV into timestamps plus a numeric matrix.

    The first column must be named ``date`` and parse as timestamps in strictly
    increasing order; every other cell must be numeric. Errors name the offending
    row and column. When a descriptor is given, its variate names must match the
    header.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such CSV file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(f"{path}: file is empty") from None
        if not header or header[0].strip() != timestamp_column:
            raise CsvParseError(
                f"{path}: first column must be named {timestamp_column!r}, got {header[:1]}"
            )
        columns = tuple(c.strip() for c in header[1:])
        if not columns:
            raise CsvParseError(f"{path}: no variate columns after {timestamp_column!r}")

        timestamps: list[datetime] = []
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns) + 1:
                raise CsvParseError(
                    f"{path}: row {line_no} has {len(row)} cells, expected {len(columns) + 1}"
                )
            try:
                ts = parse_timestamp(row[0])
            except CsvParseError as exc:
                raise CsvParseError(f"{path}: row {line_no}, column {timestamp_column!r}: {exc}") from None
            if timestamps and ts <= timestamps[-1]:
                raise CsvParseError(
                    f"{path}: non-monotonic timestamp {ts.isoformat()} at row {line_no}"
                )
            parsed = []
            for col_name, cell in zip(columns, row[1:]):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise CsvParseError(
                        f"{path}: non-numeric value {cell!r} at row {line_no}, column {col_name!r}"
                    ) from None
            timestamps.append(ts)
            rows.append(parsed)

    if not rows:
        raise CsvParseError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64)
    if descriptor is not None and tuple(descriptor.variate_names) != columns:
        raise CsvParseError(
            f"{path}: columns {list(columns)} do not match descriptor "
            f"{list(descriptor.variate_names)}"
        )
    logger.info("loaded %s: %d rows, %d variates (%s)", path.name, len(rows),
                len(columns), ", ".join(columns))
    return RawTable(timestamps=timestamps, values=values, columns=columns)


def compute_train_stats(train_values: np.ndarray, columns: tuple[str, ...]) -> NormalizationStats:
    mean = train_values.mean(axis=0)
    std = train_values.std(axis=0)
    degenerate = std == 0.0
    if degenerate.any():
        names = [c for c, d in zip(columns, degenerate) if d]
        warnings.warn(f"constant variates {names}: std replaced by 1 for normalization")
        std = np.where(degenerate, 1.0, std)
    return NormalizationStats(mean=mean, std=std, degenerate=degenerate, columns=columns)


def split_and_normalize(
    table: RawTable,
    spec: SplitSpec,
    look_back: int,
    dataset_id: str = "",
) -> tuple[Segment, Segment, Segment, NormalizationStats]:
    """Split a table into train/val/test segments and z-score with train statistics.

    Val and test segments start with the last ``look_back`` rows of the preceding
    segment, so the first target row of each split has a full input window.
    """
    if look_back <= 0:
        raise ValueError("look_back must be positive")
    train_end, val_end, test_end = spec.borders(table.n_rows)
    if train_end <= look_back:
        raise SplitError(
            f"train segment of {train_end} rows too short for look_back={look_back}"
        )
    stats = compute_train_stats(table.values[:train_end], table.columns)
    normalized = stats.normalize(table.values)

    bounds = {
        "train": (0, train_end),
        "val": (train_end - look_back, val_end),
        "test": (val_end - look_back, test_end),
    }
    segments = {}
    for split, (lo, hi) in bounds.items():
        if hi - lo <= look_back and split != "train":
            raise SplitError(f"{split} segment of {hi - lo} rows cannot hold one window")
        segments[split] = Segment(
            dataset_id=dataset_id,
            split=split,
            timestamps=table.timestamps[lo:hi],
            raw=table.values[lo:hi],
            normalized=normalized[lo:hi],
        )
    return segments["train"], segments["val"], segments["test"], stats


def window_count(n_rows: int, t_en: int, s: int, stride: int = 1) -> int:
    """Number of (input, target) windows a segment of ``n_rows`` rows yields."""
    usable = n_rows - t_en - s + 1
    if usable <= 0:
        return 0
    return (usable - 1) // stride + 1


def window_stream(
    segment: Segment,
    t_en: int,
    t_ex: int | None = None,
    s: int = 1,
    stride: int = 1,
) -> Iterator[TimeWindowSample]:
    """Slide a window over a segment: endogenous = last variate, exogenous = the rest.

    The exogenous window is right-aligned with the endogenous window, i.e. both end
    at the same row. With stride 1 the count is ``n_rows - t_en - s + 1``.
    """
    t_ex = t_en if t_ex is None else t_ex
    if t_en <= 0 or s <= 0:
        raise ValueError("t_en and s must be positive")
    if t_ex > t_en:
        raise ValueError(f"t_ex={t_ex} exceeds t_en={t_en}; exogenous window is right-aligned")
    if t_ex <= 0:
        raise ValueError("t_ex must be positive")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = segment.n_rows
    count = window_count(n, t_en, s, stride)
    if count == 0:
        raise SplitError(
            f"{segment.dataset_id or 'segment'}/{segment.split}: {n} rows cannot hold "
            f"one window of t_en={t_en}, s={s}"
        )
    norm = segment.normalized
    raw = segment.raw
    for i in range(0, n - t_en - s + 1, stride):
        yield TimeWindowSample(
            x_en=norm[i:i + t_en, -1].astype(np.float32),
            x_ex=norm[i + t_en - t_ex:i + t_en, :-1].astype(np.float32),
            y_en=norm[i + t_en:i + t_en + s, -1].astype(np.float32),
            start_timestamp=segment.timestamps[i],
            target_start_timestamp=segment.timestamps[i + t_en],
            dataset_id=segment.dataset_id,
            x_en_raw=raw[i:i + t_en, -1].copy(),
        )


@dataclass(frozen=True)
class RegistryEntry:
    """One dataset registration: file location plus descriptive metadata."""

    name: str
    path: Path
    domain: str
    frequency: str
    exogenous_descriptions: str
    source_note: str
    split: SplitSpec = field(default_factory=SplitSpec)
    endogenous: str | None = None  # defaults to the last CSV column


def load_registry(path: str | Path) -> dict[str, RegistryEntry]:
    """Read a JSON registry mapping dataset name to location and metadata.

    Relative CSV paths are resolved against the registry file's directory.
    """
    path = Path(path)
    raw = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(raw, dict) or not raw:
        raise ValueError(f"{path}: registry must be a non-empty JSON object")
    entries = {}
    for name, item in raw.items():
        missing = {"path", "domain", "frequency", "exogenous_descriptions", "source_note"} - set(item)
        if missing:
            raise ValueError(f"{path}: dataset {name!r} missing keys {sorted(missing)}")
        csv_path = Path(item["path"])
        if not csv_path.is_absolute():
            csv_path = path.parent / csv_path
        entries[name] = RegistryEntry(
            name=name,
            path=csv_path,
            domain=item["domain"],
            frequency=item["frequency"],
            exogenous_descriptions=item["exogenous_descriptions"],
            source_note=item["source_note"],
            split=SplitSpec.from_json(item.get("split", [7, 1, 2])),
            endogenous=item.get("endogenous"),
        )
    return entries


@dataclass
class IngestedDataset:
    """A loaded, split, and normalized dataset ready for windowing."""

    descriptor: DatasetDescriptor
    train: Segment
    val: Segment
    test: Segment
    stats: NormalizationStats


def ingest(entry: RegistryEntry, look_back: int) -> IngestedDataset:
    """Load a registered CSV, make the endogenous column last, split, and normalize."""
    table = load_csv(entry.path)
    if entry.endogenous is not None:
        table = table.with_endogenous(entry.endogenous)
    descriptor = DatasetDescriptor(
        name=entry.name,
        domain=entry.domain,
        frequency=entry.frequency,
        variate_names=table.columns,
        endogenous_name=table.columns[-1],
        exogenous_descriptions=entry.exogenous_descriptions,
        source_note=entry.source_note,
    )
    train, val, test, stats = split_and_normalize(table, entry.split, look_back, dataset_id=entry.name)
    return IngestedDataset(descriptor=descriptor, train=train, val=val, test=test, stats=stats)
