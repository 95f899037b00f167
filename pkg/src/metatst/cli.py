"""Command-line entry point wiring registries, configs, training, and exports.

Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, training
from .config import AggregationStrategy, ModelConfig
from .data import load_registry
from .encoding import EmbeddingCache, HashStubBackend, MetaEmbedder, ServiceBackend
from .metadata import canonical_templates
from .model import model_from_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

ABLATION_LABELS = {"drop_meta": "w/o Meta", "drop_exo": "w/o Ex.", "drop_endo": "w/o En."}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metatst",
        description="Metadata-informed time series forecasting runs",
    )
    parser.add_argument("--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, datasets: str):
        p.add_argument("--registry", required=True, help="JSON dataset registry")
        if datasets == "one":
            p.add_argument("--dataset", required=True, help="dataset name from the registry")
        else:
            p.add_argument("--datasets", required=True, nargs="+", help="dataset names from the registry")
        p.add_argument("--config", help="JSON model/training config; defaults are the unified short-term values")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="run output directory")
        p.add_argument("--backend", choices=["hash_stub", "service"], default="hash_stub")
        p.add_argument("--model-id", default="t5-base", help="embedding model for the service backend")
        p.add_argument("--embed-dim", type=int, default=64, help="hash_stub native dimension")
        p.add_argument("--embed-url", default=None, help="embedding service URL (or METATST_EMBED_URL)")
        p.add_argument("--cache-dir", default=None, help="embedding cache directory (or METATST_CACHE_DIR)")
        p.add_argument("--no-extrema", action="store_true", help="omit min/max from sample metadata")
        p.add_argument("--raw-space", action="store_true",
                       help="report test metrics in raw units instead of normalized space")
        p.add_argument("--aggregation", choices=["special_token", "average_pooling", "router"], default=None)
        p.add_argument("--routers", type=int, default=None, help="router count for router aggregation")
        # Overrides mirroring the config vocabulary, so published settings paste directly.
        p.add_argument("--e_layers", type=int, default=None)
        p.add_argument("--d_model", type=int, default=None)
        p.add_argument("--d_ff", type=int, default=None)
        p.add_argument("--n_heads", type=int, default=None)
        p.add_argument("--patch", type=int, default=None)
        p.add_argument("--dropout", type=float, default=None)
        p.add_argument("--batch_size", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--learning_rate", type=float, default=None)
        p.add_argument("--input_len", type=int, default=None)
        p.add_argument("--output_len", type=int, default=None)

    p_train = sub.add_parser("train", help="single-dataset individual training")
    add_common(p_train, datasets="one")

    p_joint = sub.add_parser("joint-train", help="multi-dataset joint training")
    add_common(p_joint, datasets="many")
    p_joint.add_argument("--zero-shot", action="store_true", help="zero-shot test metrics per dataset")
    p_joint.add_argument("--probe", action="store_true", help="linear-probe the head per dataset after training")

    p_ablate = sub.add_parser("ablate", help="train and evaluate an input-token ablation")
    add_common(p_ablate, datasets="one")
    p_ablate.add_argument("--drop-meta", action="store_true")
    p_ablate.add_argument("--drop-exo", action="store_true")
    p_ablate.add_argument("--drop-endo", action="store_true")
    p_ablate.add_argument("--baseline-metrics", default=None,
                          help="metrics log of the full model for a comparison table")

    p_export = sub.add_parser("export", help="export attention maps, metadata representations, or templates")
    p_export.add_argument("--checkpoint", default=None)
    p_export.add_argument("--registry", default=None)
    p_export.add_argument("--dataset", default=None)
    p_export.add_argument("--split", choices=["train", "val", "test"], default="test")
    p_export.add_argument("--sample", type=int, default=0)
    p_export.add_argument("--attention", action="store_true")
    p_export.add_argument("--meta-reps", action="store_true")
    p_export.add_argument("--templates", action="store_true")
    p_export.add_argument("--backend", choices=["hash_stub", "service"], default="hash_stub")
    p_export.add_argument("--model-id", default="t5-base")
    p_export.add_argument("--embed-dim", type=int, default=64)
    p_export.add_argument("--embed-url", default=None)
    p_export.add_argument("--cache-dir", default=None)
    p_export.add_argument("--no-extrema", action="store_true")
    p_export.add_argument("--out", default=".", help="output directory")

    sub.add_parser("dump-templates", help="print the canonical metadata templates")
    return parser


def _build_backend(args):
    if args.backend == "service":
        url = args.embed_url or os.environ.get("METATST_EMBED_URL")
        if not url:
            raise ValueError("service backend needs --embed-url or METATST_EMBED_URL")
        return ServiceBackend(url=url, model_id=args.model_id)
    return HashStubBackend(dim=args.embed_dim)


def _build_embedder(args, config: ModelConfig) -> MetaEmbedder | None:
    if config.drop_meta:
        return None
    backend = _build_backend(args)
    cache_dir = args.cache_dir or os.environ.get("METATST_CACHE_DIR")
    cache = None
    if cache_dir:
        cache = EmbeddingCache(Path(cache_dir) / "embeddings.cache")
    return MetaEmbedder(backend, config.aggregation, cache=cache)


def _load_config(parser: argparse.ArgumentParser, args) -> ModelConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            parser.error(f"config file not found: {path}")
        config = ModelConfig.load(path)
    else:
        config = ModelConfig()
    overrides = {}
    for flag, field_name in [
        ("e_layers", "e_layers"), ("d_model", "d_model"), ("d_ff", "d_ff"),
        ("n_heads", "n_heads"), ("patch", "patch_len"), ("dropout", "dropout"),
        ("batch_size", "batch_size"), ("epochs", "epochs"),
        ("learning_rate", "learning_rate"), ("input_len", "input_len"),
        ("output_len", "output_len"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = value
    if args.aggregation is not None or args.routers is not None:
        kind = args.aggregation or config.aggregation.kind
        routers = args.routers or config.aggregation.router_count
        overrides["aggregation"] = AggregationStrategy(kind=kind, router_count=routers)
    if getattr(args, "drop_meta", False):
        overrides["drop_meta"] = True
    if getattr(args, "drop_exo", False):
        overrides["drop_exo"] = True
    if getattr(args, "drop_endo", False):
        overrides["drop_endo"] = True
    return config.replace(**overrides) if overrides else config


def _resolve_datasets(parser, args, names: list[str]) -> dict:
    registry_path = Path(args.registry)
    if not registry_path.exists():
        parser.error(f"registry file not found: {registry_path}")
    registry = load_registry(registry_path)
    unknown = [n for n in names if n not in registry]
    if unknown:
        parser.error(f"datasets not in registry: {unknown} (available: {sorted(registry)})")
    return {n: registry[n] for n in names}


def _metrics_logger(path: Path, run_id: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("", encoding="utf-8")  # a rerun replaces the log, never appends to it

    def log(record: dict) -> None:
        row = {"run_id": run_id, **record}
        with path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    return log


def _prepare_run(parser, args, names: list[str], command: str):
    config = _load_config(parser, args)
    entries = _resolve_datasets(parser, args, names)
    embedder = _build_embedder(args, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    backend_id = embedder.backend.model_id if embedder is not None else "none"
    manifest = training.run_manifest(
        command=command,
        datasets=names,
        config=config,
        seed=args.seed,
        backend_model_id=backend_id,
        extra={"registry": str(Path(args.registry).resolve()), "include_extrema": not args.no_extrema},
    )
    run_id = training.manifest_run_id(manifest)
    training.write_run_manifest(out_dir / "manifest.json", manifest)
    datasets = [
        training.dataset_from_registry(entry, config, embedder, include_extrema=not args.no_extrema)
        for entry in entries.values()
    ]
    return config, datasets, embedder, out_dir, run_id, backend_id


def _append_metrics(log, metrics: evaluation.ForecastMetrics, epoch: int) -> None:
    log({
        "epoch": epoch,
        "dataset": metrics.dataset_id,
        "split": metrics.split,
        "mse": metrics.mse,
        "mae": metrics.mae,
        "scenario": metrics.scenario or None,
    })


def cmd_train(parser, args) -> int:
    config, datasets, _, out_dir, run_id, backend_id = _prepare_run(parser, args, [args.dataset], "train")
    log = _metrics_logger(out_dir / "metrics.jsonl", run_id)
    model, state = training.train_individual(datasets[0], config, seed=args.seed, log=log)
    save_checkpoint(out_dir / "checkpoint.npz", model, backend_model_id=backend_id,
                    extra={"datasets": [args.dataset], "run_id": run_id})
    test_metrics = training.evaluate_split(model, datasets[0], split="test",
                                           scenario="individual", raw_space=args.raw_space)
    _append_metrics(log, test_metrics, epoch=state.best_epoch)
    print(f"run {run_id}: best val MSE {state.best_val_mse:.4f} (epoch {state.best_epoch}), "
          f"test MSE {test_metrics.mse:.4f}, MAE {test_metrics.mae:.4f}")
    return 0


def cmd_joint_train(parser, args) -> int:
    names = list(args.datasets)
    if len(names) == 1:
        logger.warning("joint training with a single dataset degenerates to individual training")
    config, datasets, _, out_dir, run_id, backend_id = _prepare_run(parser, args, names, "joint-train")
    log = _metrics_logger(out_dir / "metrics.jsonl", run_id)
    model, state = training.train_joint(datasets, config, seed=args.seed, log=log)
    save_checkpoint(out_dir / "checkpoint.npz", model, backend_model_id=backend_id,
                    extra={"datasets": names, "run_id": run_id})
    for dataset in datasets:
        per_ds = _metrics_logger(out_dir / f"metrics_{dataset.dataset_id}.jsonl", run_id)
        for record in state.history:
            if record["dataset"] == dataset.dataset_id:
                per_ds(record)
    summary = [f"run {run_id}: best pooled val MSE {state.best_val_mse:.4f} (epoch {state.best_epoch})"]
    if args.zero_shot:
        for dataset in datasets:
            metrics = training.zero_shot_eval(model, dataset, raw_space=args.raw_space)
            _append_metrics(log, metrics, epoch=state.best_epoch)
            summary.append(f"zero-shot {dataset.dataset_id}: MSE {metrics.mse:.4f}, MAE {metrics.mae:.4f}")
    if args.probe:
        for dataset in datasets:
            result = training.linear_probe(model, dataset, config=config, seed=args.seed)
            _append_metrics(log, result.metrics, epoch=result.state.best_epoch)
            summary.append(f"probed {dataset.dataset_id}: MSE {result.metrics.mse:.4f}, "
                           f"MAE {result.metrics.mae:.4f}")
    print("\n".join(summary))
    return 0


def cmd_ablate(parser, args) -> int:
    flags = [f for f in ("drop_meta", "drop_exo", "drop_endo") if getattr(args, f)]
    if not flags:
        parser.error("ablate needs one of --drop-meta, --drop-exo, --drop-endo")
    if len(flags) == 3:
        parser.error("cannot drop endogenous, exogenous, and metadata tokens all at once")
    config, datasets, _, out_dir, run_id, backend_id = _prepare_run(parser, args, [args.dataset], "ablate")
    label = " + ".join(ABLATION_LABELS[f] for f in flags)
    log = _metrics_logger(out_dir / "metrics.jsonl", run_id)
    model, state = training.train_individual(datasets[0], config, seed=args.seed, log=log)
    save_checkpoint(out_dir / "checkpoint.npz", model, backend_model_id=backend_id,
                    extra={"datasets": [args.dataset], "run_id": run_id, "ablation": flags})
    metrics = training.evaluate_split(model, datasets[0], split="test", scenario=label,
                                      raw_space=args.raw_space)
    _append_metrics(log, metrics, epoch=state.best_epoch)
    lines = [f"{label} on {args.dataset}: test MSE {metrics.mse:.4f}, MAE {metrics.mae:.4f}"]
    if args.baseline_metrics:
        baseline_path = Path(args.baseline_metrics)
        if baseline_path.exists():
            baseline = [
                json.loads(line) for line in baseline_path.read_text(encoding="utf-8").splitlines()
                if line.strip()
            ]
            tests = [r for r in baseline if r.get("split") == "test" and r.get("dataset") == args.dataset]
            if tests:
                full = tests[-1]
                lines.append(f"full model      : test MSE {full['mse']:.4f}, MAE {full['mae']:.4f}")
                lines.append(f"MSE change      : {metrics.mse - full['mse']:+.4f}")
        else:
            lines.append(f"baseline metrics not found at {baseline_path}; skipping comparison")
    table = "\n".join(lines)
    (out_dir / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_export(parser, args) -> int:
    wants = [args.attention, args.meta_reps, args.templates]
    if not any(wants):
        parser.error("export needs at least one of --attention, --meta-reps, --templates")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.templates:
        print(json.dumps(canonical_templates(), indent=2))
    if not (args.attention or args.meta_reps):
        return 0

    if not args.checkpoint:
        parser.error("--attention and --meta-reps need --checkpoint")
    if not (args.registry and args.dataset):
        parser.error("--attention and --meta-reps need --registry and --dataset")
    model = model_from_checkpoint(args.checkpoint)
    config = model.config
    entries = _resolve_datasets(parser, args, [args.dataset])
    embedder = _build_embedder(args, config)
    dataset = training.dataset_from_registry(
        entries[args.dataset], config, embedder, include_extrema=not args.no_extrema
    )
    samples = getattr(dataset, args.split)

    if args.attention:
        if not 0 <= args.sample < len(samples):
            raise IndexError(
                f"sample index {args.sample} out of range for {len(samples)} {args.split} samples"
            )
        kwargs = samples.model_inputs(np.array([args.sample]))
        attention = evaluation.extract_attention(
            model,
            x_en=kwargs["x_en"][0].numpy(),
            x_ex=kwargs["x_ex"][0].numpy(),
            meta_agg=kwargs["meta_agg"][0].numpy() if "meta_agg" in kwargs else None,
            meta_words=kwargs.get("meta_words"),
            meta_mask=kwargs.get("meta_mask"),
        )
        path = out_dir / f"attention_{args.dataset}_{args.split}_{args.sample}.npz"
        np.savez(path, matrix=attention.matrix, segments=np.array(attention.segments))
        print(f"wrote {path} ({attention.matrix.shape[0]}x{attention.matrix.shape[1]} tokens)")
    if args.meta_reps:
        export = evaluation.export_meta_representations(model, [dataset], split=args.split)
        csv_path = export.to_csv(out_dir / f"meta_representations_{args.dataset}_{args.split}.csv")
        export.to_npz(out_dir / f"meta_representations_{args.dataset}_{args.split}.npz")
        print(f"wrote {csv_path} ({len(export)} rows)")
    return 0


def cmd_dump_templates(_parser, _args) -> int:
    print(json.dumps(canonical_templates(), indent=2))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    handlers = {
        "train": cmd_train,
        "joint-train": cmd_joint_train,
        "ablate": cmd_ablate,
        "export": cmd_export,
        "dump-templates": cmd_dump_templates,
    }
    try:
        return handlers[args.command](parser, args)
    except SystemExit as exc:  # parser.error inside a handler
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - single reporting point for runtime failures
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
