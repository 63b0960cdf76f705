"""Metrics, attention heatmap export, and the analytic FLOP cost model.

AUROC uses the rank (Mann-Whitney) estimator with half credit for ties,
which equals the trapezoidal ROC area.  Heatmaps project the product of
instance attention and sub-bag attention back onto each sampled slice,
normalise per slice, and record the patch with the globally highest weight.
The FLOP model counts 2 FLOPs per multiply-accumulate in convolutions,
linear layers, and both attention tiers; normalisation and activations are
ignored (sub-percent).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .data import SubBagBatch
from .encoder import EncoderConfig, _layer_plan
from .errors import (ContractViolationError, InvalidInputError,
                     UndefinedMetricError)
from .mil import ForwardTrace

FLOPS_PER_MAC = 2


# --- metrics -----------------------------------------------------------------------

@dataclass
class MetricReport:
    accuracy: float
    auroc: float
    f1: float
    n_pos: int
    n_neg: int
    threshold: float = 0.5


def _as_arrays(preds, labels):
    p = np.asarray(preds, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if p.size == 0:
        raise InvalidInputError("empty prediction list")
    if p.shape != y.shape:
        raise ContractViolationError(f"{p.shape} predictions vs {y.shape} labels")
    if not set(np.unique(y)).issubset({0, 1}):
        raise InvalidInputError("labels must be 0/1")
    return p, y.astype(int)


def accuracy(preds, labels) -> float:
    """Fraction classified correctly at threshold 0.5; ties count as positive."""
    p, y = _as_arrays(preds, labels)
    return float(np.mean((p >= 0.5).astype(int) == y))


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) with ties worth one half, via average ranks."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = stats.rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1(preds, labels) -> float:
    """F1 of the positive class at threshold 0.5; defined as 0 when TP = 0."""
    p, y = _as_arrays(preds, labels)
    hard = (p >= 0.5).astype(int)
    tp = int(np.sum((hard == 1) & (y == 1)))
    fp = int(np.sum((hard == 1) & (y == 0)))
    fn = int(np.sum((hard == 0) & (y == 1)))
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def compute_metrics(preds, labels) -> MetricReport:
    p, y = _as_arrays(preds, labels)
    return MetricReport(accuracy=accuracy(p, y), auroc=auroc(p, y), f1=f1(p, y),
                        n_pos=int(y.sum()), n_neg=int(y.size - y.sum()))


def write_metrics_csv(path, rows: list[dict]) -> Path:
    """Append-style metrics table: run_id, split, accuracy, auroc, f1, n_pos, n_neg, seed."""
    path = Path(path)
    cols = ["run_id", "split", "accuracy", "auroc", "f1", "n_pos", "n_neg", "seed"]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in cols})
    return path


def format_mean_std(values) -> str:
    """Table-style "0.682 ± 0.030" with sample std (0 for a single run)."""
    v = np.asarray(values, dtype=float)
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return f"{float(v.mean()):.3f} ± {std:.3f}"


# --- attention heatmaps -----------------------------------------------------------------

@dataclass
class HeatmapRecord:
    volume_id: str
    rows: list[tuple]                       # per-patch records
    maps: dict[int, np.ndarray]             # slice -> [R, C] in [0, 1]
    pre_norm_mass: dict[int, float]
    max_patch: dict

    def argmax_row(self) -> tuple:
        return max(self.rows, key=lambda row: row[6] * row[7])


def write_pgm(path, image: np.ndarray) -> Path:
    """8-bit binary portable graymap (P5) from an array in [0, 1]."""
    img = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
    return path


def export_heatmap(trace: ForwardTrace, batch: SubBagBatch, out_dir) -> HeatmapRecord:
    """Accumulate attention into patch windows, normalise per slice, write files.

    Each pixel receives the coverage-averaged sum of (instance attention x
    sub-bag attention) of the patches covering it; per slice the map is
    scaled to [0, 1].  Emits one PGM per sampled slice plus a per-patch CSV
    and returns the in-memory record including the max-attention patch box.
    """
    if trace.volume_id and trace.volume_id != batch.volume_id:
        raise ContractViolationError(
            f"trace is for {trace.volume_id!r} but batch is for {batch.volume_id!r}")
    M, K, r, c = batch.patches.shape
    if trace.instance_attention.shape != (M, K):
        raise ContractViolationError("trace and batch disagree on M x K")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    R, C = batch.in_plane_shape

    rows = []
    acc: dict[int, np.ndarray] = {}
    cov: dict[int, np.ndarray] = {}
    for m in range(M):
        s = int(batch.slice_indices[m])
        acc.setdefault(s, np.zeros((R, C)))
        cov.setdefault(s, np.zeros((R, C), dtype=int))
        for k in range(K):
            i, j = (int(v) for v in batch.origins[m, k])
            w = float(trace.instance_attention[m, k])
            acc[s][i:i + r, j:j + c] += w * float(trace.subbag_attention[m])
            cov[s][i:i + r, j:j + c] += 1
            rows.append((m, s, i, j, r, c,
                         float(trace.instance_attention[m, k]),
                         float(trace.subbag_attention[m])))

    maps, mass = {}, {}
    for s in acc:
        covered = cov[s] > 0
        m_raw = np.zeros((R, C))
        m_raw[covered] = acc[s][covered] / cov[s][covered]
        mass[s] = float(m_raw.sum())
        peak = m_raw.max()
        maps[s] = m_raw / peak if peak > 0 else m_raw
        write_pgm(out_dir / f"{batch.volume_id}_slice{s:03d}.pgm", maps[s])

    bm, bk = np.unravel_index(
        np.argmax(trace.instance_attention * trace.subbag_attention[:, None]), (M, K))
    i, j = (int(v) for v in batch.origins[bm, bk])
    max_patch = {"subbag": int(bm), "instance": int(bk),
                 "slice": int(batch.slice_indices[bm]),
                 "row": i, "col": j, "rows": r, "cols": c}

    csv_path = out_dir / f"{batch.volume_id}_patches.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subbag_index", "slice", "row_offset", "col_offset",
                         "rows", "cols", "instance_attention", "subbag_attention"])
        writer.writerows(rows)
    return HeatmapRecord(volume_id=batch.volume_id, rows=rows, maps=maps,
                         pre_norm_mass=mass, max_patch=max_patch)


# --- FLOP cost model -------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchRegime:
    """MIL input: M sub-bags x K instances of rows x cols patches."""
    M: int
    K: int
    rows: int
    cols: int


@dataclass(frozen=True)
class VolumeRegime:
    """Whole-volume input for the 3D baseline."""
    rows: int
    cols: int
    slices: int


@dataclass
class FlopReport:
    total: float
    breakdown: list[tuple[str, float]] = field(default_factory=list)


def _encoder_config_from_descriptor(desc: dict) -> tuple[EncoderConfig, int, int]:
    cfg = EncoderConfig(
        in_rows=desc["in_rows"], in_cols=desc["in_cols"],
        channels=tuple(desc["channels"]), num_blocks=desc["num_blocks"],
        embedding_dim=desc["embedding_dim"], norm_kind=desc["norm_kind"],
        num_groups=desc.get("num_groups", 8), stem_stride=desc.get("stem_stride", 1),
        in_slices=desc.get("in_slices"))
    return cfg, desc["dim"], desc["out_dim"]


def encoder_flops(enc_desc: dict, in_spatial: tuple[int, ...]) -> FlopReport:
    """Analytic multiply-accumulate walk over the encoder's weighted layers."""
    cfg, dim, out_dim = _encoder_config_from_descriptor(enc_desc)
    if len(in_spatial) != dim:
        raise ContractViolationError(
            f"encoder is {dim}D but input regime has {len(in_spatial)} spatial dims")
    spatial = tuple(int(s) for s in in_spatial)
    block_in = spatial
    breakdown = []
    total = 0.0
    for kind, name, cin, cout, k, stride in _layer_plan(cfg, dim, out_dim):
        if kind == "conv":
            pad = k // 2
            # projection shortcuts consume the block input, not conv1's output
            src = block_in if name.endswith(".proj") else spatial
            out_spatial = tuple((s + 2 * pad - k) // stride + 1 for s in src)
            macs = (k ** dim) * cin * cout * float(np.prod(out_spatial))
            if name.endswith(".conv1"):
                block_in = spatial
            if not name.endswith(".proj"):
                spatial = out_spatial
        else:
            macs = float(cin * cout)
        breakdown.append((name, FLOPS_PER_MAC * macs))
        total += FLOPS_PER_MAC * macs
    return FlopReport(total=total, breakdown=breakdown)


def _attention_macs(attention_dim: int, embed_dim: int) -> float:
    # score per instance: V h (D*L) plus w . tanh (D)
    return attention_dim * embed_dim + attention_dim


def mil_flops(model_desc: dict, regime: PatchRegime) -> FlopReport:
    """Patch pipeline plus both attention tiers for the MIL model families.

    abmil is the single-tier special case (no bag tier); dtfd and the
    hierarchical model share the double-tier structure.
    """
    enc = model_desc["encoder"]
    D = model_desc["attention_dim"]
    L = enc["embedding_dim"]
    n_groups = regime.M if model_desc["family"] != "abmil" else 1
    n_inst = regime.M * regime.K

    per_patch = encoder_flops(enc, (regime.rows, regime.cols))
    breakdown = [("encoder x instances", n_inst * per_patch.total)]
    inst_tier = n_inst * _attention_macs(D, L) + n_inst * L + n_groups * (L + 1)
    breakdown.append(("instance tier attention+classifier", FLOPS_PER_MAC * inst_tier))
    total = breakdown[0][1] + breakdown[1][1]
    if model_desc["family"] != "abmil":
        bag_tier = n_groups * _attention_macs(D, L) + n_groups * L + (L + 1)
        breakdown.append(("bag tier attention+classifier", FLOPS_PER_MAC * bag_tier))
        total += breakdown[-1][1]
    return FlopReport(total=total, breakdown=breakdown)


def flop_cost(model_desc: dict, regime) -> FlopReport:
    """Dispatch on model family and input regime."""
    family = model_desc.get("family")
    if family == "supervised3d":
        if not isinstance(regime, VolumeRegime):
            raise ContractViolationError("supervised3d expects a VolumeRegime")
        rep = encoder_flops(model_desc["encoder"], (regime.rows, regime.cols, regime.slices))
        return FlopReport(total=rep.total, breakdown=[("encoder3d", rep.total)])
    if family in ("hamil", "abmil", "dtfd"):
        if not isinstance(regime, PatchRegime):
            raise ContractViolationError(f"{family} expects a PatchRegime")
        return mil_flops(model_desc, regime)
    raise ContractViolationError(f"unknown model family {family!r} in descriptor")
