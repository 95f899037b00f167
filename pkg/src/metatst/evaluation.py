"""Forecast metrics, attention-map extraction, and representation exports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .metadata import META_LEVELS

# Column order used by the short-term electricity-price result tables.
EPF_DATASET_ORDER = ("NP", "PJM", "BE", "FR", "DE")


@dataclass(frozen=True)
class ForecastMetrics:
    """MSE/MAE for one (dataset, horizon, split) evaluation."""

    dataset_id: str
    horizon: int
    split: str
    mse: float
    mae: float
    n_samples: int
    scenario: str = ""

    def __post_init__(self):
        if self.mse < 0 or self.mae < 0:
            raise ValueError("mse and mae must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(
    predictions: np.ndarray,
    targets: np.ndarray,
    dataset_id: str = "",
    horizon: int | None = None,
    split: str = "",
    scenario: str = "",
) -> ForecastMetrics:
    """Mean squared and mean absolute error over all elements, in normalized space."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValueError(f"shape mismatch: predictions {predictions.shape} vs targets {targets.shape}")
    if predictions.size == 0:
        raise ValueError("cannot compute metrics on empty arrays")
    residuals = predictions - targets
    n_samples = predictions.shape[0] if predictions.ndim > 1 else predictions.size
    if horizon is None:
        horizon = predictions.shape[-1] if predictions.ndim > 1 else 1
    return ForecastMetrics(
        dataset_id=dataset_id,
        horizon=int(horizon),
        split=split,
        mse=float(np.mean(residuals**2)),
        mae=float(np.mean(np.abs(residuals))),
        n_samples=int(n_samples),
        scenario=scenario,
    )


def horizon_average(metrics: list[ForecastMetrics], dataset_id: str = "") -> ForecastMetrics:
    """Unweighted mean MSE/MAE across prediction lengths (the ``Avg.`` convention)."""
    if not metrics:
        raise ValueError("cannot average an empty metrics list")
    return ForecastMetrics(
        dataset_id=dataset_id or metrics[0].dataset_id,
        horizon=0,
        split=metrics[0].split,
        mse=float(np.mean([m.mse for m in metrics])),
        mae=float(np.mean([m.mae for m in metrics])),
        n_samples=int(sum(m.n_samples for m in metrics)),
        scenario=metrics[0].scenario,
    )


@dataclass
class AttentionMap:
    """Head- and layer-averaged attention with per-token segment labels."""

    matrix: np.ndarray  # (n_tokens, n_tokens)
    segments: tuple[str, ...]

    def __post_init__(self):
        k = self.matrix.shape[0]
        if self.matrix.shape != (k, k):
            raise ValueError(f"attention matrix must be square, got {self.matrix.shape}")
        if len(self.segments) != k:
            raise ValueError("one segment label per token is required")

    def block(self, row_segment: str, col_segment: str) -> np.ndarray:
        """Sub-matrix of attention from one token family onto another."""
        rows = [i for i, s in enumerate(self.segments) if s == row_segment]
        cols = [j for j, s in enumerate(self.segments) if s == col_segment]
        return self.matrix[np.ix_(rows, cols)]


def extract_attention(
    model,
    x_en: np.ndarray | torch.Tensor | None,
    x_ex: np.ndarray | torch.Tensor | None = None,
    meta_agg: np.ndarray | torch.Tensor | None = None,
    meta_words: torch.Tensor | None = None,
    meta_mask: torch.Tensor | None = None,
) -> AttentionMap:
    """Average the softmax attention over all heads and layers for one sample."""
    from .tokens import segment_labels

    if len(model.encoder) == 0:
        raise ValueError("cannot extract attention from a zero-layer encoder")

    x_en_t = None if x_en is None else torch.as_tensor(np.asarray(x_en), dtype=torch.float32).reshape(1, -1)
    x_ex_t = None
    if x_ex is not None:
        x_ex_t = torch.as_tensor(np.asarray(x_ex), dtype=torch.float32)
        if x_ex_t.ndim == 2:
            x_ex_t = x_ex_t.unsqueeze(0)
    meta_agg_t = None
    if meta_agg is not None:
        meta_agg_t = torch.as_tensor(np.asarray(meta_agg), dtype=torch.float32)
        if meta_agg_t.ndim == 2:
            meta_agg_t = meta_agg_t.unsqueeze(0)

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            _, maps = model(
                x_en=x_en_t,
                x_ex=x_ex_t,
                meta_agg=meta_agg_t,
                meta_words=meta_words,
                meta_mask=meta_mask,
                collect_attention=True,
            )
    finally:
        model.train(was_training)
    stacked = torch.stack([m[0] for m in maps])  # (layers, heads, K, K)
    averaged = stacked.mean(dim=(0, 1)).numpy()
    n_exo = 0 if x_ex_t is None else x_ex_t.shape[-1]
    n, c, m = model.token_counts(n_exo)
    return AttentionMap(matrix=averaged, segments=segment_labels(n, c, m))


@dataclass
class MetaRepresentationExport:
    """Post-alignment metadata tokens for offline projection and analysis."""

    dataset_ids: list[str]
    levels: list[str]
    vectors: np.ndarray  # (n_rows, d_model)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dataset_id", "level"] + [f"dim_{i}" for i in range(self.vectors.shape[1])])
            for ds, level, vec in zip(self.dataset_ids, self.levels, self.vectors):
                writer.writerow([ds, level] + [repr(float(v)) for v in vec])
        return path

    def to_npz(self, path: str | Path) -> Path:
        path = Path(path)
        np.savez(
            path,
            dataset_ids=np.array(self.dataset_ids),
            levels=np.array(self.levels),
            vectors=self.vectors,
        )
        return path


def export_meta_representations(model, datasets, split: str = "test") -> MetaRepresentationExport:
    """Dump each sample's three aligned metadata tokens, one row per (sample, level)."""
    dataset_ids: list[str] = []
    levels: list[str] = []
    chunks: list[np.ndarray] = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for dataset in datasets:
                samples = getattr(dataset, split)
                if samples.meta_agg is not None:
                    aligned = model.embed_meta(meta_agg=torch.from_numpy(samples.meta_agg))
                else:
                    words, mask = samples.padded_meta_words()
                    aligned = model.embed_meta(meta_words=words, meta_mask=mask)
                aligned = aligned.numpy()  # (n, M, D)
                for row in aligned:
                    for level, vec in zip(META_LEVELS, row):
                        dataset_ids.append(dataset.dataset_id)
                        levels.append(level)
                        chunks.append(vec)
    finally:
        model.train(was_training)
    return MetaRepresentationExport(
        dataset_ids=dataset_ids,
        levels=levels,
        vectors=np.stack(chunks) if chunks else np.zeros((0, model.config.d_model), dtype=np.float32),
    )


def promotion_marker(joint: float, individual: float) -> str:
    """Up arrow when joint training reduced the error, down when it increased it."""
    if joint < individual:
        return "↑"
    if joint > individual:
        return "↓"
    return ""


def result_table(
    records: list[ForecastMetrics],
    order: tuple[str, ...] | None = None,
) -> str:
    """Plain-text comparison of individual vs joint metrics with promotion markers.

    Datasets missing one side are reported as gaps, never errors. An ``Avg.``
    column averages whatever datasets each scenario has.
    """
    by_scenario: dict[str, dict[str, ForecastMetrics]] = {"individual": {}, "joint": {}}
    seen: list[str] = []
    for rec in records:
        scenario = rec.scenario or "individual"
        if scenario not in by_scenario:
            by_scenario[scenario] = {}
        by_scenario[scenario][rec.dataset_id] = rec
        if rec.dataset_id not in seen:
            seen.append(rec.dataset_id)
    datasets = [d for d in (order or seen) if d in seen]
    gaps = [
        ds for ds in datasets
        if (ds in by_scenario["individual"]) != (ds in by_scenario["joint"])
    ]

    header = ["scenario"]
    for ds in datasets:
        header += [f"{ds} MSE", f"{ds} MAE"]
    header += ["Avg. MSE", "Avg. MAE"]

    def row_for(scenario: str) -> list[str]:
        cells = [scenario]
        mses, maes = [], []
        for ds in datasets:
            rec = by_scenario[scenario].get(ds)
            if rec is None:
                cells += ["-", "-"]
                continue
            mse_mark = mae_mark = ""
            other = by_scenario["joint" if scenario == "individual" else "individual"].get(ds)
            if scenario == "joint" and other is not None:
                mse_mark = promotion_marker(rec.mse, other.mse)
                mae_mark = promotion_marker(rec.mae, other.mae)
            cells += [f"{rec.mse:.3f}{mse_mark}", f"{rec.mae:.3f}{mae_mark}"]
            mses.append(rec.mse)
            maes.append(rec.mae)
        if mses:
            cells += [f"{np.mean(mses):.3f}", f"{np.mean(maes):.3f}"]
        else:
            cells += ["-", "-"]
        return cells

    rows = [header]
    for scenario in ("individual", "joint"):
        if by_scenario[scenario]:
            rows.append(row_for(scenario))
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    if gaps:
        lines.append(f"gaps (one scenario missing): {', '.join(gaps)}")
    return "\n".join(lines)


def write_metrics_records(path: str | Path, records: list[dict]) -> Path:
    """Append line-delimited JSON metric records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path
