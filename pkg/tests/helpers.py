"""Shared builders for synthetic tables, datasets, and tiny configs."""

from __future__ import annotations

import csv
import json
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from metatst.config import ModelConfig
from metatst.data import (
    DatasetDescriptor,
    RawTable,
    RegistryEntry,
    SplitSpec,
    TimeWindowSample,
    ingest,
)
from metatst.encoding import HashStubBackend, MetaEmbedder
from metatst.metadata import TaskDescriptor
from metatst.training import ForecastDataset, build_forecast_dataset, build_sample_set

START = datetime(2015, 1, 1)


def hourly_timestamps(n_rows: int, start: datetime = START) -> list[datetime]:
    return [start + timedelta(hours=i) for i in range(n_rows)]


def synthetic_values(n_rows: int, n_cols: int, seed: int = 0, kind: str = "sine") -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = np.arange(n_rows, dtype=np.float64)
    cols = []
    for j in range(n_cols):
        if kind == "sine":
            base = np.sin(2 * np.pi * t / 24.0 + j) + 0.05 * j
        elif kind == "trend":
            base = 0.01 * t + j
        else:
            raise ValueError(kind)
        cols.append(base + 0.1 * rng.standard_normal(n_rows))
    return np.column_stack(cols)


def write_csv(path: Path, values: np.ndarray, columns: list[str] | None = None,
              start: datetime = START) -> Path:
    n_rows, n_cols = values.shape
    columns = columns or [f"v{j}" for j in range(n_cols)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date"] + columns)
        for ts, row in zip(hourly_timestamps(n_rows, start), values):
            writer.writerow([ts.strftime("%Y-%m-%d %H:%M:%S")] + [repr(float(v)) for v in row])
    return Path(path)


def raw_table(n_rows: int, n_cols: int, seed: int = 0, kind: str = "sine") -> RawTable:
    values = synthetic_values(n_rows, n_cols, seed=seed, kind=kind)
    return RawTable(
        timestamps=hourly_timestamps(n_rows),
        values=values,
        columns=tuple(f"v{j}" for j in range(n_cols)),
    )


def registry_entry(tmp_path: Path, name: str, n_rows: int, n_cols: int, seed: int = 0,
                   kind: str = "sine", split: SplitSpec | None = None) -> RegistryEntry:
    csv_path = write_csv(tmp_path / f"{name}.csv", synthetic_values(n_rows, n_cols, seed=seed, kind=kind))
    return RegistryEntry(
        name=name,
        path=csv_path,
        domain="Electricity",
        frequency="1 Hour",
        exogenous_descriptions="synthetic auxiliary signals",
        source_note=f"Synthetic benchmark {name}.",
        split=split or SplitSpec(),
    )


def write_registry(tmp_path: Path, specs: dict[str, dict]) -> Path:
    """specs: name -> {n_rows, n_cols, seed?, kind?}; writes CSVs plus registry.json."""
    registry = {}
    for name, spec in specs.items():
        values = synthetic_values(spec["n_rows"], spec["n_cols"], seed=spec.get("seed", 0),
                                  kind=spec.get("kind", "sine"))
        write_csv(tmp_path / f"{name}.csv", values)
        registry[name] = {
            "path": f"{name}.csv",
            "domain": spec.get("domain", "Electricity"),
            "frequency": "1 Hour",
            "exogenous_descriptions": "synthetic auxiliary signals",
            "source_note": f"Synthetic benchmark {name}.",
            "split": spec.get("split", [7, 1, 2]),
        }
    path = tmp_path / "registry.json"
    path.write_text(json.dumps(registry, indent=2), encoding="utf-8")
    return path


def tiny_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(
        e_layers=1,
        d_model=16,
        d_ff=32,
        n_heads=2,
        patch_len=8,
        input_len=24,
        output_len=8,
        dropout=0.0,
        learning_rate=1e-3,
        batch_size=16,
        epochs=2,
    )
    return cfg.replace(**overrides) if overrides else cfg


def tiny_embedder(dim: int = 16, cache=None, strategy=None) -> MetaEmbedder:
    return MetaEmbedder(HashStubBackend(dim=dim), strategy, cache=cache)


def csv_dataset(tmp_path: Path, name: str, config: ModelConfig, n_rows: int = 400,
                n_cols: int = 3, seed: int = 0, kind: str = "sine",
                embedder: MetaEmbedder | None = None) -> ForecastDataset:
    """A ForecastDataset produced through the full ingestion pipeline."""
    entry = registry_entry(tmp_path, name, n_rows, n_cols, seed=seed, kind=kind)
    if embedder is None and not config.drop_meta:
        embedder = tiny_embedder()
    return build_forecast_dataset(ingest(entry, config.input_len), config, embedder)


def meta_marked_dataset(
    name: str,
    sign: float,
    embedder: MetaEmbedder | None,
    n_train: int = 1024,
    n_val: int = 128,
    n_test: int = 128,
    t_en: int = 32,
    s: int = 16,
    seed: int = 42,
) -> ForecastDataset:
    """Two-arm synthetic: i.i.d. noise histories, futures = sign * sin over one period.

    The only dataset-distinguishing signal is the dataset-level metadata text.
    """
    rng = np.random.default_rng(seed)
    descriptor = DatasetDescriptor(
        name=name,
        domain=f"{name} synthetic",
        frequency="1 Hour",
        variate_names=("signal",),
        endogenous_name="signal",
        exogenous_descriptions="none",
        source_note=f"Synthetic benchmark {name}.",
    )
    task = TaskDescriptor(
        target_name="signal", input_length=t_en, output_length=s,
        task_kind="short-term forecasting",
    )
    future = sign * np.sin(2 * np.pi * np.arange(s) / s).astype(np.float32)

    def windows(count: int, offset: int) -> list[TimeWindowSample]:
        out = []
        for i in range(count):
            history = rng.standard_normal(t_en).astype(np.float32)
            out.append(
                TimeWindowSample(
                    x_en=history,
                    x_ex=np.zeros((t_en, 0), dtype=np.float32),
                    y_en=future.copy(),
                    start_timestamp=START + timedelta(hours=offset + i),
                    target_start_timestamp=START + timedelta(hours=offset + i + t_en),
                    dataset_id=name,
                    x_en_raw=history.astype(np.float64),
                )
            )
        return out

    return ForecastDataset(
        dataset_id=name,
        train=build_sample_set(windows(n_train, 0), descriptor, task, embedder),
        val=build_sample_set(windows(n_val, 100_000), descriptor, task, embedder),
        test=build_sample_set(windows(n_test, 200_000), descriptor, task, embedder),
        descriptor=descriptor,
        task=task,
    )
