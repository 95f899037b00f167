"""Optimization protocols: individual training, multi-dataset joint training with
homogeneous batch mixing, zero-shot evaluation, and linear probing.

Every batch contains samples from exactly one dataset, so variate counts never
need padding. Dataset choice per batch is proportional to remaining sample
counts, each epoch visits every sample exactly once, and the whole schedule is
deterministic under a fixed seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .config import ModelConfig
from .data import DatasetDescriptor, IngestedDataset, NormalizationStats, RegistryEntry, TimeWindowSample, ingest, window_stream
from .encoding import MetaEmbedder
from .evaluation import ForecastMetrics, compute_metrics
from .metadata import TEMPLATE_VERSION, SampleStats, TaskDescriptor, meta_parse
from .model import Checkpoint, MetaTST, model_from_checkpoint


def l2_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of squared differences over every element in the batch."""
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(prediction.shape)} vs target {tuple(target.shape)}")
    return torch.mean((prediction - target) ** 2)


@dataclass
class SampleSet:
    """Stacked windows of one split, with per-sample metadata features attached.

    ``meta_agg`` holds aggregated native-width vectors for parameter-free
    aggregation; ``meta_words`` holds per-level word-token matrices when the
    trainable router collapses them inside the model.
    """

    x_en: np.ndarray  # (n, t_en) float32
    x_ex: np.ndarray  # (n, t_ex, c) float32
    y_en: np.ndarray  # (n, s) float32
    start_timestamps: list[datetime]
    meta_agg: np.ndarray | None = None  # (n, n_levels, meta_dim) float32
    meta_words: list[list[np.ndarray]] | None = None

    def __post_init__(self):
        n = self.x_en.shape[0]
        if self.x_ex.shape[0] != n or self.y_en.shape[0] != n:
            raise ValueError("sample arrays disagree on the number of windows")

    def __len__(self) -> int:
        return self.x_en.shape[0]

    @property
    def n_exo(self) -> int:
        return self.x_ex.shape[2]

    @property
    def meta_dim(self) -> int | None:
        if self.meta_agg is not None:
            return self.meta_agg.shape[-1]
        if self.meta_words is not None:
            return self.meta_words[0][0].shape[-1]
        return None

    def padded_meta_words(self, indices: np.ndarray | None = None):
        """Pad per-sample word matrices to (batch, n_levels, max_words, dim) + mask."""
        if self.meta_words is None:
            raise ValueError("this sample set has no word-level metadata tokens")
        rows = self.meta_words if indices is None else [self.meta_words[i] for i in indices]
        n_levels = len(rows[0])
        dim = rows[0][0].shape[1]
        max_words = max(seq.shape[0] for levels in rows for seq in levels)
        words = torch.zeros(len(rows), n_levels, max_words, dim)
        mask = torch.zeros(len(rows), n_levels, max_words, dtype=torch.bool)
        for i, levels in enumerate(rows):
            for k, seq in enumerate(levels):
                words[i, k, : seq.shape[0]] = torch.from_numpy(seq)
                mask[i, k, : seq.shape[0]] = True
        return words, mask

    def model_inputs(self, indices: np.ndarray | None = None, dtype=torch.float32) -> dict:
        idx = np.arange(len(self)) if indices is None else indices
        kwargs = {
            "x_en": torch.from_numpy(self.x_en[idx]).to(dtype),
            "x_ex": torch.from_numpy(self.x_ex[idx]).to(dtype),
        }
        if self.meta_agg is not None:
            kwargs["meta_agg"] = torch.from_numpy(self.meta_agg[idx]).to(dtype)
        elif self.meta_words is not None:
            words, mask = self.padded_meta_words(idx)
            kwargs["meta_words"] = words.to(dtype)
            kwargs["meta_mask"] = mask
        return kwargs

    def targets(self, indices: np.ndarray | None = None, dtype=torch.float32) -> torch.Tensor:
        idx = np.arange(len(self)) if indices is None else indices
        return torch.from_numpy(self.y_en[idx]).to(dtype)


@dataclass
class ForecastDataset:
    """One dataset's windowed splits, ready for the training loop."""

    dataset_id: str
    train: SampleSet
    val: SampleSet
    test: SampleSet
    descriptor: DatasetDescriptor | None = None
    task: TaskDescriptor | None = None
    stats: NormalizationStats | None = None

    @property
    def n_exo(self) -> int:
        return self.train.n_exo

    @property
    def meta_dim(self) -> int | None:
        return self.train.meta_dim


def build_sample_set(
    samples: Sequence[TimeWindowSample],
    descriptor: DatasetDescriptor,
    task: TaskDescriptor,
    embedder: MetaEmbedder | None,
    include_extrema: bool = True,
) -> SampleSet:
    """Stack windows and attach metadata features rendered from each sample's stats."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot build a sample set from zero windows")
    meta_agg = None
    meta_words = None
    if embedder is not None:
        bundles = [
            meta_parse(
                descriptor,
                task,
                SampleStats.from_history(s.x_en_raw, s.start_timestamp),
                include_extrema=include_extrema,
            )
            for s in samples
        ]
        if embedder.strategy.trainable:
            meta_words = [
                [seq.vectors for seq in embedder.bundle_word_sequences(b)] for b in bundles
            ]
        else:
            meta_agg = np.stack([embedder.bundle_vectors(b) for b in bundles]).astype(np.float32)
    return SampleSet(
        x_en=np.stack([s.x_en for s in samples]),
        x_ex=np.stack([s.x_ex for s in samples]),
        y_en=np.stack([s.y_en for s in samples]),
        start_timestamps=[s.start_timestamp for s in samples],
        meta_agg=meta_agg,
        meta_words=meta_words,
    )


def build_forecast_dataset(
    ingested: IngestedDataset,
    config: ModelConfig,
    embedder: MetaEmbedder | None,
    include_extrema: bool = True,
    stride: int = 1,
) -> ForecastDataset:
    """Window an ingested dataset and embed its metadata for all three splits."""
    task = TaskDescriptor(
        target_name=ingested.descriptor.endogenous_name,
        input_length=config.input_len,
        output_length=config.output_len,
        task_kind=config.task_kind,
    )
    splits = {}
    for split_name in ("train", "val", "test"):
        segment = getattr(ingested, split_name)
        windows = window_stream(
            segment, t_en=config.input_len, t_ex=config.input_len, s=config.output_len, stride=stride
        )
        splits[split_name] = build_sample_set(
            list(windows), ingested.descriptor, task, embedder, include_extrema=include_extrema
        )
    return ForecastDataset(
        dataset_id=ingested.descriptor.name,
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        descriptor=ingested.descriptor,
        task=task,
        stats=ingested.stats,
    )


def dataset_from_registry(
    entry: RegistryEntry,
    config: ModelConfig,
    embedder: MetaEmbedder | None,
    include_extrema: bool = True,
) -> ForecastDataset:
    return build_forecast_dataset(ingest(entry, config.input_len), config, embedder, include_extrema)


def mixed_batch_sampler(
    sample_counts: Sequence[int],
    batch_size: int,
    seed=None,
    rng: np.random.Generator | None = None,
) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (dataset_index, sample_indices) batches, each from a single dataset.

    Per-dataset sample order is a seeded permutation, the dataset for each batch
    is drawn with probability proportional to its remaining samples, and the last
    short batch of each dataset is kept.
    """
    counts = [int(c) for c in sample_counts]
    if not counts:
        raise ValueError("at least one dataset is required")
    if any(c <= 0 for c in counts):
        raise ValueError(f"every dataset needs at least one sample, got {counts}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    permutations = [rng.permutation(c) for c in counts]
    cursor = [0] * len(counts)
    remaining = list(counts)
    total = sum(remaining)
    while total > 0:
        probs = np.asarray(remaining, dtype=np.float64) / total
        ds = int(rng.choice(len(counts), p=probs))
        take = min(batch_size, remaining[ds])
        batch = permutations[ds][cursor[ds]:cursor[ds] + take]
        cursor[ds] += take
        remaining[ds] -= take
        total -= take
        yield ds, batch


@dataclass
class TrainState:
    """Bookkeeping for one optimization run."""

    seed: int
    steps: int = 0
    epoch: int = 0
    best_val_mse: float = math.inf
    best_epoch: int = -1
    best_state: dict | None = None
    optimizer_state: dict | None = None
    history: list[dict] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)


def predict(model: MetaTST, samples: SampleSet, batch_size: int = 256) -> np.ndarray:
    """Batched eval-mode predictions for a whole sample set."""
    was_training = model.training
    model.eval()
    chunks = []
    try:
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                idx = np.arange(start, min(start + batch_size, len(samples)))
                chunks.append(model(**samples.model_inputs(idx)).numpy())
    finally:
        model.train(was_training)
    return np.concatenate(chunks, axis=0)


def evaluate_split(
    model: MetaTST,
    dataset: ForecastDataset,
    split: str = "val",
    batch_size: int = 256,
    scenario: str = "",
    raw_space: bool = False,
) -> ForecastMetrics:
    """Metrics over one split, in normalized space unless ``raw_space`` is set."""
    samples: SampleSet = getattr(dataset, split)
    predictions = predict(model, samples, batch_size=batch_size)
    targets = samples.y_en
    if raw_space:
        if dataset.stats is None:
            raise ValueError(f"{dataset.dataset_id}: no normalization stats for raw-space metrics")
        predictions = dataset.stats.denormalize_endogenous(predictions)
        targets = dataset.stats.denormalize_endogenous(targets)
    return compute_metrics(
        predictions,
        targets,
        dataset_id=dataset.dataset_id,
        horizon=samples.y_en.shape[1],
        split=split,
        scenario=scenario,
    )


def _check_compatible(datasets: Sequence[ForecastDataset], config: ModelConfig) -> None:
    for ds in datasets:
        if ds.train.x_en.shape[1] != config.input_len:
            raise ValueError(
                f"{ds.dataset_id}: window length {ds.train.x_en.shape[1]} incompatible "
                f"with configured input_len {config.input_len}"
            )
        if ds.train.y_en.shape[1] != config.output_len:
            raise ValueError(
                f"{ds.dataset_id}: horizon {ds.train.y_en.shape[1]} incompatible "
                f"with configured output_len {config.output_len}"
            )
    t_ex = {ds.train.x_ex.shape[1] for ds in datasets}
    if len(t_ex) != 1:
        raise ValueError(f"datasets disagree on exogenous window length: {sorted(t_ex)}")
    if not config.drop_meta:
        dims = {ds.meta_dim for ds in datasets}
        if len(dims) != 1 or None in dims:
            raise ValueError(f"datasets disagree on metadata feature width: {dims}")


def _clone_state(model: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _run_epochs(
    model: MetaTST,
    datasets: Sequence[ForecastDataset],
    config: ModelConfig,
    optimizer: torch.optim.Optimizer,
    state: TrainState,
    log: Callable[[dict], None] | None = None,
) -> None:
    """Shared epoch loop: homogeneous batches, per-epoch validation, best-val tracking."""
    counts = [len(ds.train) for ds in datasets]
    for epoch in range(1, config.epochs + 1):
        model.train()
        loss_sum = 0.0
        sample_sum = 0
        sampler = mixed_batch_sampler(counts, config.batch_size, seed=(state.seed, epoch))
        for ds_idx, indices in sampler:
            train_set = datasets[ds_idx].train
            optimizer.zero_grad()
            prediction = model(**train_set.model_inputs(indices))
            loss = l2_loss(prediction, train_set.targets(indices))
            loss_value = float(loss.item())
            if not math.isfinite(loss_value):
                raise RuntimeError(
                    f"non-finite training loss {loss_value} at epoch {epoch}, step {state.steps}, "
                    f"dataset {datasets[ds_idx].dataset_id}"
                )
            loss.backward()
            optimizer.step()
            state.steps += 1
            loss_sum += loss_value * len(indices)
            sample_sum += len(indices)
        state.epoch = epoch
        epoch_loss = loss_sum / sample_sum
        state.train_losses.append(epoch_loss)
        record = {"epoch": epoch, "dataset": "*", "split": "train", "mse": epoch_loss, "mae": None}
        state.history.append(record)
        if log:
            log(record)

        pooled_num = 0.0
        pooled_den = 0
        for ds in datasets:
            metrics = evaluate_split(model, ds, split="val")
            record = {
                "epoch": epoch,
                "dataset": ds.dataset_id,
                "split": "val",
                "mse": metrics.mse,
                "mae": metrics.mae,
            }
            state.history.append(record)
            if log:
                log(record)
            pooled_num += metrics.mse * metrics.n_samples
            pooled_den += metrics.n_samples
        pooled = pooled_num / pooled_den
        state.val_curve.append(pooled)
        if pooled < state.best_val_mse:
            state.best_val_mse = pooled
            state.best_epoch = epoch
            state.best_state = _clone_state(model)
    if state.best_state is not None:
        model.load_state_dict(state.best_state)
    state.optimizer_state = optimizer.state_dict()


def train_joint(
    datasets: Sequence[ForecastDataset],
    config: ModelConfig,
    seed: int = 0,
    log: Callable[[dict], None] | None = None,
) -> tuple[MetaTST, TrainState]:
    """Train one unified parameter set over mixed datasets with homogeneous batches."""
    datasets = list(datasets)
    if not datasets:
        raise ValueError("at least one dataset is required")
    _check_compatible(datasets, config)
    torch.manual_seed(seed)
    meta_dim = None if config.drop_meta else datasets[0].meta_dim
    model = MetaTST(config, meta_dim=meta_dim, t_ex=datasets[0].train.x_ex.shape[1])
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    state = TrainState(seed=seed)
    _run_epochs(model, datasets, config, optimizer, state, log=log)
    return model, state


def train_individual(
    dataset: ForecastDataset,
    config: ModelConfig,
    seed: int = 0,
    log: Callable[[dict], None] | None = None,
) -> tuple[MetaTST, TrainState]:
    """Single-dataset training; the degenerate case of the joint protocol."""
    return train_joint([dataset], config, seed=seed, log=log)


def zero_shot_eval(
    source: MetaTST | Checkpoint | str | Path,
    dataset: ForecastDataset,
    split: str = "test",
    batch_size: int = 256,
    raw_space: bool = False,
) -> ForecastMetrics:
    """Evaluate a trained model on a dataset split with no parameter updates."""
    model = source if isinstance(source, MetaTST) else model_from_checkpoint(source)
    if dataset.train.x_en.shape[1] != model.config.input_len:
        raise ValueError(
            f"{dataset.dataset_id}: window length {dataset.train.x_en.shape[1]} incompatible "
            f"with checkpoint input_len {model.config.input_len}"
        )
    if dataset.train.y_en.shape[1] != model.config.output_len:
        raise ValueError(
            f"{dataset.dataset_id}: horizon {dataset.train.y_en.shape[1]} incompatible "
            f"with checkpoint output_len {model.config.output_len}"
        )
    return evaluate_split(model, dataset, split=split, batch_size=batch_size,
                          scenario="zero-shot", raw_space=raw_space)


@dataclass
class ProbeResult:
    model: MetaTST
    state: TrainState
    metrics: ForecastMetrics


def linear_probe(
    source: MetaTST | Checkpoint | str | Path,
    dataset: ForecastDataset,
    config: ModelConfig | None = None,
    seed: int = 0,
    log: Callable[[dict], None] | None = None,
) -> ProbeResult:
    """Retrain only the forecasting head of a frozen checkpoint on a target dataset."""
    model = copy.deepcopy(source) if isinstance(source, MetaTST) else model_from_checkpoint(source)
    cfg = config if config is not None else model.config
    _check_compatible([dataset], cfg)
    for name, param in model.named_parameters():
        param.requires_grad_(name.startswith("head."))
    head_params = [p for p in model.parameters() if p.requires_grad]
    torch.manual_seed(seed)
    optimizer = torch.optim.Adam(head_params, lr=cfg.learning_rate)
    state = TrainState(seed=seed)
    probe_cfg = cfg if cfg.epochs >= 0 else cfg
    _run_epochs(model, [dataset], probe_cfg, optimizer, state, log=log)
    metrics = evaluate_split(model, dataset, split="test", scenario="joint")
    return ProbeResult(model=model, state=state, metrics=metrics)


def promotion(joint_error: float, individual_error: float) -> float:
    """Relative error reduction of joint over individual training."""
    if individual_error == 0:
        raise ValueError("individual error is zero; relative reduction undefined")
    return 1.0 - joint_error / individual_error


def run_manifest(
    command: str,
    datasets: Sequence[str],
    config: ModelConfig,
    seed: int,
    backend_model_id: str,
    template_version: str = TEMPLATE_VERSION,
    extra: dict | None = None,
) -> dict:
    """Everything needed to re-execute a run bit-identically on one device."""
    manifest = {
        "command": command,
        "datasets": list(datasets),
        "config": config.to_dict(),
        "seed": seed,
        "backend_model_id": backend_model_id,
        "template_version": template_version,
    }
    if extra:
        manifest["extra"] = extra
    return manifest


def manifest_run_id(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def write_run_manifest(path: str | Path, manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def history_records(run_id: str, history: Sequence[dict]) -> list[dict]:
    """Line-delimited metric records: {run_id, dataset, epoch, split, mse, mae}."""
    return [
        {
            "run_id": run_id,
            "dataset": rec["dataset"],
            "epoch": rec["epoch"],
            "split": rec["split"],
            "mse": rec["mse"],
            "mae": rec["mae"],
        }
        for rec in history
    ]
