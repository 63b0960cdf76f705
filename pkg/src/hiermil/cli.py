"""Command-line entry point: dataset generation, training, evaluation,
heatmaps, and FLOP reports under one binary.

Exit codes: 0 success, 2 usage error, 1 runtime failure (with one
machine-readable ``hiermil-error kind=... msg=...`` line on stderr).
``HIERMIL_DATA_ROOT`` supplies a default ``--data`` manifest location.
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import train as train_mod
from .data import (ARTIFACT_KINDS, DEFAULT_RATIOS, SynthConfig,
                   generate_synthetic_dataset, load_manifest, load_volume,
                   normalize_volume, split_dataset)
from .encoder import EncoderConfig, resnet10_config
from .errors import ConfigurationError, HiermilError, UndefinedMetricError
from .evaluation import (FLOPS_PER_MAC, PatchRegime, VolumeRegime,
                         export_heatmap, flop_cost, format_mean_std,
                         write_metrics_csv)
from .models import MODEL_FAMILIES, ModelSpec, build_harness
from .train import (TrainConfig, evaluate_on_split, harness_from_checkpoint,
                    load_checkpoint, run_repeats, train, val_rng)

ENV_DATA_ROOT = "HIERMIL_DATA_ROOT"


def _default_data() -> str | None:
    root = os.environ.get(ENV_DATA_ROOT)
    if not root:
        return None
    p = Path(root)
    return str(p / "manifest.txt" if p.is_dir() else p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiermil",
        description="Hierarchical attention MIL for volume quality classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset + split manifest")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=int, default=200, help="number of volumes")
    g.add_argument("--dims", type=int, nargs=3, default=[64, 64, 24],
                   metavar=("R", "C", "S"))
    g.add_argument("--balance", type=float, default=0.5,
                   help="fraction of diagnostic (label 1) volumes")
    g.add_argument("--defect-rate", type=float, default=0.5,
                   help="fraction of corruptible slices damaged in label-0 volumes")
    g.add_argument("--kinds", nargs="+", default=list(ARTIFACT_KINDS),
                   choices=list(ARTIFACT_KINDS))
    g.add_argument("--ratios", type=float, nargs=3, default=list(DEFAULT_RATIOS),
                   metavar=("TRAIN", "VAL", "TEST"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one model family on a manifest")
    t.add_argument("--data", default=_default_data(), help="manifest path")
    t.add_argument("--model", default="hamil", choices=list(MODEL_FAMILIES))
    t.add_argument("--M", type=int, default=None, help="sub-bags per volume (default 6)")
    t.add_argument("--K", type=int, default=None, help="instances per sub-bag (default 60)")
    t.add_argument("--patch", type=int, nargs=2, default=None, metavar=("R", "C"))
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--patience", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--eta-min", type=float, default=None)
    t.add_argument("--bags-per-step", type=int, default=None)
    t.add_argument("--lambda", dest="loss_weight_lambda", type=float, default=None)
    t.add_argument("--distill-mode", choices=["attention_weighted", "mean"], default=None)
    t.add_argument("--precision", choices=["float32", "float64"], default=None)
    t.add_argument("--embedding-dim", type=int, default=None)
    t.add_argument("--attention-dim", type=int, default=None)
    t.add_argument("--channels", type=int, nargs="+", default=None)
    t.add_argument("--pseudo-bags", type=int, default=None, help="dtfd pseudo-bag count")
    t.add_argument("--supervised-shape", type=int, nargs=3, default=None)
    t.add_argument("--config", default=None, help="config file; flags override its values")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--force", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or re-train repeatedly)")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", default=_default_data())
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--repeats", type=int, default=0,
                   help="if > 0: retrain this many times (seeds seed..seed+n-1) and report mean ± std")
    e.add_argument("--csv", default=None, help="write the metrics table here")
    e.add_argument("--run-id", default="eval")
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(fn=cmd_eval)

    h = sub.add_parser("heatmap", help="export attention heatmaps for one volume")
    h.add_argument("--ckpt", required=True)
    h.add_argument("--data", default=_default_data())
    h.add_argument("--volume-id", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--seed", type=int, default=0)
    h.set_defaults(fn=cmd_heatmap)

    f = sub.add_parser("flops", help="analytic FLOP costs and pairwise ratios")
    f.add_argument("--model", default="all", choices=["all", *MODEL_FAMILIES])
    f.add_argument("--M", type=int, default=6)
    f.add_argument("--K", type=int, default=60)
    f.add_argument("--patch", type=int, nargs=2, default=[48, 48], metavar=("R", "C"))
    f.add_argument("--volume-dims", type=int, nargs=3, default=[240, 240, 44],
                   metavar=("R", "C", "S"))
    f.set_defaults(fn=cmd_flops)
    return parser


# --- gen-data ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    manifest_path = out / "manifest.txt"
    if manifest_path.exists() and not args.force:
        raise ConfigurationError(
            f"{manifest_path} already exists; pass --force to overwrite")
    cfg = SynthConfig(n_volumes=args.n, dims=tuple(args.dims),
                      defect_rate=args.defect_rate, artifact_kinds=tuple(args.kinds),
                      class_balance=args.balance, seed=args.seed)
    manifest = generate_synthetic_dataset(cfg, out, workers=args.workers)
    manifest = split_dataset(manifest, ratios=tuple(args.ratios), seed=args.seed)
    counts = {s: len(manifest.ids(s)) for s in ("train", "val", "test")}
    digest = hashlib.sha256(manifest_path.read_bytes()).hexdigest()
    print(f"wrote {args.n} volumes to {out}")
    print(f"train {counts['train']} / val {counts['val']} / test {counts['test']}")
    print(f"manifest sha256: {digest}")
    return 0


# --- train ----------------------------------------------------------------------------

def _load_config_file(path) -> dict:
    """Config files are flat ``key: value`` text or JSON with the same keys."""
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        out = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(":")
            out[key.strip()] = value.strip()
        return out


_TRAIN_KEYS = {"epochs": int, "learning_rate": float, "eta_min": float,
               "patience": int, "bags_per_step": int, "M": int, "K": int,
               "seed": int, "loss_weight_lambda": float, "distill_mode": str,
               "precision": str}
_MODEL_KEYS = {"model": str, "embedding_dim": int, "attention_dim": int,
               "pseudo_bags": int, "patch_rows": int, "patch_cols": int}


def _resolve_train_config(args):
    file_cfg = _load_config_file(args.config) if args.config else {}

    def pick(flag_value, key, cast, default):
        if flag_value is not None:
            return flag_value
        if key in file_cfg:
            return cast(file_cfg[key])
        return default

    cfg = TrainConfig(
        epochs=pick(args.epochs, "epochs", int, 50),
        learning_rate=pick(args.lr, "learning_rate", float, 1e-4),
        eta_min=pick(args.eta_min, "eta_min", float, 0.0),
        patience=pick(args.patience, "patience", int, 8),
        bags_per_step=pick(args.bags_per_step, "bags_per_step", int, 1),
        M=pick(args.M, "M", int, 6),
        K=pick(args.K, "K", int, 60),
        seed=pick(args.seed, "seed", int, 0),
        loss_weight_lambda=pick(args.loss_weight_lambda, "loss_weight_lambda", float, 1.0),
        distill_mode=pick(args.distill_mode, "distill_mode", str, "attention_weighted"),
        precision=pick(args.precision, "precision", str, "float32"),
    )
    patch = args.patch or [int(file_cfg.get("patch_rows", 16)), int(file_cfg.get("patch_cols", 16))]
    family = args.model or file_cfg.get("model", "hamil")
    enc = EncoderConfig(
        in_rows=patch[0], in_cols=patch[1],
        channels=tuple(args.channels) if args.channels else (16, 32, 64),
        embedding_dim=pick(args.embedding_dim, "embedding_dim", int, 64))
    spec = ModelSpec(
        family=family, encoder=enc,
        attention_dim=pick(args.attention_dim, "attention_dim", int, 64),
        pseudo_bag_count=pick(args.pseudo_bags, "pseudo_bags", int, 6),
        supervised_shape=tuple(args.supervised_shape) if args.supervised_shape else (96, 96, 32))
    return cfg, spec


def cmd_train(args) -> int:
    if not args.data:
        raise ConfigurationError(f"--data not given and {ENV_DATA_ROOT} is unset")
    manifest = load_manifest(args.data)
    cfg, spec = _resolve_train_config(args)
    out = Path(args.out)
    if (out / "best.ckpt").exists() and not args.force:
        raise ConfigurationError(f"{out} already holds a run; pass --force to overwrite")
    print(f"model={spec.family} M={cfg.M} K={cfg.K} lr={cfg.learning_rate} "
          f"epochs={cfg.epochs} patience={cfg.patience} seed={cfg.seed}")
    log = None if args.quiet else print
    result = train(manifest, spec, cfg, out_dir=out, log=log)
    print(f"best val AUROC {result.best_val_auroc:.4f} at epoch {result.best_epoch}; "
          f"run directory: {out}")
    return 0


# --- eval ------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    if not args.data:
        raise ConfigurationError(f"--data not given and {ENV_DATA_ROOT} is unset")
    manifest = load_manifest(args.data)
    ckpt = load_checkpoint(args.ckpt)
    harness, cfg = harness_from_checkpoint(ckpt)
    rows = []
    if args.repeats and args.repeats > 0:
        from .models import spec_from_descriptor
        spec = spec_from_descriptor(ckpt.descriptor)
        rep = run_repeats(manifest, spec, cfg, n_runs=args.repeats, split=args.split,
                          log=None if args.quiet else print)
        table = rep.mean_std_rows()
        print(f"{spec.family} on {args.split} over {args.repeats} run(s):")
        for metric in ("accuracy", "auroc", "f1"):
            print(f"  {metric:9s} {table[metric]}")
        for seed, r in zip(rep.seeds, rep.reports):
            rows.append({"run_id": f"{args.run_id}-seed{seed}", "split": args.split,
                         "accuracy": r.accuracy, "auroc": r.auroc, "f1": r.f1,
                         "n_pos": r.n_pos, "n_neg": r.n_neg, "seed": seed})
    else:
        report = evaluate_on_split(harness, manifest, args.split, ckpt.seed)
        print(f"{ckpt.family} on {args.split}:")
        for metric in ("accuracy", "auroc", "f1"):
            print(f"  {metric:9s} {format_mean_std([getattr(report, metric)])}")
        rows.append({"run_id": args.run_id, "split": args.split,
                     "accuracy": report.accuracy, "auroc": report.auroc,
                     "f1": report.f1, "n_pos": report.n_pos, "n_neg": report.n_neg,
                     "seed": ckpt.seed})
    if args.csv:
        write_metrics_csv(args.csv, rows)
        print(f"metrics csv: {args.csv}")
    return 0


# --- heatmap ------------------------------------------------------------------------------

def cmd_heatmap(args) -> int:
    if not args.data:
        raise ConfigurationError(f"--data not given and {ENV_DATA_ROOT} is unset")
    manifest = load_manifest(args.data)
    ckpt = load_checkpoint(args.ckpt)
    harness, _cfg = harness_from_checkpoint(ckpt)
    if not hasattr(harness, "trace"):
        raise ConfigurationError(f"{ckpt.family} has no attention maps to export")
    volume = normalize_volume(load_volume(manifest.volume_path(args.volume_id)))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([args.seed, 99])))
    trace, batch = harness.trace(volume, rng)
    record = export_heatmap(trace, batch, args.out)
    mp = record.max_patch
    print(f"wrote {len(record.maps)} slice map(s) and patch CSV to {args.out}")
    print(f"max-attention patch: slice {mp['slice']} rows {mp['row']}:{mp['row'] + mp['rows']} "
          f"cols {mp['col']}:{mp['col'] + mp['cols']} (sub-bag {mp['subbag']})")
    return 0


# --- flops -----------------------------------------------------------------------------------

def _flop_descriptors(args) -> dict[str, tuple[dict, object]]:
    pr, pc = args.patch
    vr, vc, vs = args.volume_dims
    desk = EncoderConfig(in_rows=pr, in_cols=pc)
    canonical3d = resnet10_config(in_rows=vr, in_cols=vc, in_slices=vs)
    mil_regime = PatchRegime(args.M, args.K, pr, pc)
    out: dict[str, tuple[dict, object]] = {}
    for family in ("hamil", "abmil", "dtfd"):
        spec = ModelSpec(family=family, encoder=desk)
        harness = build_harness(spec, args.M, args.K)
        out[family] = (harness.descriptor(), mil_regime)
    spec3 = ModelSpec(family="supervised3d", encoder=canonical3d,
                      supervised_shape=(vr, vc, vs))
    harness3 = build_harness(spec3, args.M, args.K)
    out["supervised3d"] = (harness3.descriptor(), VolumeRegime(vr, vc, vs))
    return out


def cmd_flops(args) -> int:
    descs = _flop_descriptors(args)
    if args.model != "all":
        descs = {args.model: descs[args.model]}
    totals = {}
    print(f"convention: 1 MAC = {FLOPS_PER_MAC} FLOPs; norm/activation costs ignored")
    print(f"MIL regime: M={args.M} K={args.K} patch={args.patch[0]}x{args.patch[1]}; "
          f"3D regime: {args.volume_dims[0]}x{args.volume_dims[1]}x{args.volume_dims[2]}")
    for family, (desc, regime) in descs.items():
        totals[family] = flop_cost(desc, regime).total
        print(f"  {family:13s} {totals[family]:.3e} FLOPs")
    if len(totals) > 1:
        print("pairwise ratios (row / column):")
        names = list(totals)
        for a in names:
            for b in names:
                if a != b:
                    print(f"  {a} / {b} = {totals[a] / totals[b]:.2f}")
    return 0


# --- entry -------------------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UndefinedMetricError as exc:
        print(f"hiermil-error kind={type(exc).__name__} msg=\"{exc}\"", file=sys.stderr)
        return 1
    except HiermilError as exc:
        print(f"hiermil-error kind={type(exc).__name__} msg=\"{exc}\"", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
