"""The three comparison model families, built from the same parts.

* classic_abmil: one attention pooling over the whole flat bag of patches
  (structurally the hierarchical model restricted to a single sub-bag whose
  prediction is the bag output).
* dtfd_afs: double-tier distillation over *randomly* partitioned pseudo-bags
  of the same flat bag; identical machinery to the hierarchical model except
  the grouping carries no anatomy, which isolates the value of slice-aligned
  sub-bags.
* fully_supervised_3d: one 3D residual network over the cropped, resampled
  volume.

All three train under the same optimizer/schedule/metric harness as the
hierarchical model; only the forward/backward pair differs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import nn
from .data import Volume, crop_subvolume_with_mask
from .encoder import Encoder
from .errors import (ConfigurationError, ContractViolationError,
                     InvalidInputError, NumericFailureError)
from .mil import (BCE_EPS, ModelParams, _bce_logit_grad, _check_label, bce,
                  attention_weights, attend_pool)

BASELINE_KINDS = ("fully_supervised_3d", "classic_abmil", "dtfd_afs")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    patch_rows: int = 16
    patch_cols: int = 16
    pseudo_bag_count: int = 6

    def validate(self) -> None:
        if self.kind not in BASELINE_KINDS:
            raise ConfigurationError(f"unknown baseline kind {self.kind!r}")
        if self.kind == "dtfd_afs" and self.pseudo_bag_count < 2:
            raise ConfigurationError(
                f"dtfd_afs needs pseudo_bag_count >= 2, got {self.pseudo_bag_count}")


# --- classic AB-MIL -----------------------------------------------------------------

def abmil_forward(instances: np.ndarray, params: ModelParams):
    """Flat bag of patches -> probability, via one attention pooling.

    Uses the sub-bag tier's parameters, so given identical instances this is
    bit-for-bit the hierarchical model's M=1 sub-bag prediction.
    """
    instances = np.asarray(instances)
    if instances.ndim != 3 or instances.shape[0] < 1:
        raise ContractViolationError(f"expected instances [N, r, c], got {instances.shape}")
    H = params.encoder.encode(instances)
    a = attention_weights(H, params.subbag_attention)
    pooled = attend_pool(H, a)
    prob = float(nn.sigmoid(params.subbag_classifier.logit(pooled)))
    return prob, a, pooled


def abmil_compute_gradients(batch, params: ModelParams):
    """Gradients of mean BCE over flat bags; bag-tier entries stay zero."""
    if not batch:
        raise InvalidInputError("empty batch")
    n = len(batch)
    grads = {k: np.zeros_like(v) for k, v in params.named_arrays().items()}
    total = 0.0
    preds = []
    for instances, label in batch:
        y = _check_label(label)
        instances = np.asarray(instances)
        H, enc_cache = params.encoder.forward(instances, training=True)
        T = np.tanh(H @ params.subbag_attention.V.T)
        a = nn.softmax(T @ params.subbag_attention.w)
        pooled = a @ H
        p = float(nn.sigmoid(params.subbag_classifier.logit(pooled)))
        total += bce(p, y)
        preds.append(p)

        dz = float(_bce_logit_grad(np.asarray(p), y)) / n
        g = _single_tier_backward(H, T, a, pooled, params.subbag_attention,
                                  params.subbag_classifier, dz)
        dH = g.pop("dH")
        for k, v in g.items():
            grads[k] += v
        for k, v in params.encoder.backward(enc_cache, dH).items():
            grads[f"encoder.{k}"] += v
    _check_grads_finite(grads)
    info = {"joint_loss": total / n, "subbag_loss": 0.0, "bag_loss": total / n,
            "bag_predictions": preds}
    return grads, info


def _single_tier_backward(H, T, a, pooled, attn, clf, dz):
    """Backward of sigmoid(w . attend_pool(H, softmax(gate(H)))) w.r.t. one tier."""
    g = {
        "subbag_classifier.weight": dz * pooled,
        "subbag_classifier.bias": np.array([dz if clf.bias_enabled else 0.0], dtype=H.dtype),
    }
    dpooled = dz * clf.weight
    dH = a[:, None] * dpooled[None, :]
    da = H @ dpooled
    dlogits = nn.softmax_backward(a, da)
    g["subbag_attention.w"] = T.T @ dlogits
    dU = (dlogits[:, None] * attn.w[None, :]) * (1.0 - T * T)
    g["subbag_attention.V"] = dU.T @ H
    dH += dU @ attn.V
    g["dH"] = dH
    return g


# --- DTFD (AFS distillation) -----------------------------------------------------------

def random_even_partition(n_instances: int, n_groups: int, rng: np.random.Generator):
    """Shuffle indices and split into n_groups parts whose sizes differ by <= 1."""
    if n_groups < 2:
        raise ConfigurationError(f"pseudo_bag_count must be >= 2, got {n_groups}")
    if n_instances < n_groups:
        raise ConfigurationError(
            f"bag of {n_instances} instances cannot form {n_groups} pseudo-bags")
    perm = rng.permutation(n_instances)
    return [np.sort(g) for g in np.array_split(perm, n_groups)]


def dtfd_afs_forward(instances: np.ndarray, pseudo_bag_count: int,
                     rng: np.random.Generator, params: ModelParams):
    """Random pseudo-bags -> tier-1 predictions + distilled features -> bag tier.

    Returns (bag probability, per-pseudo-bag probabilities, partition).
    """
    instances = np.asarray(instances)
    groups = random_even_partition(instances.shape[0], pseudo_bag_count, rng)
    H = params.encoder.encode(instances)
    dist = np.empty((len(groups), H.shape[1]), dtype=H.dtype)
    pseudo_preds = np.empty(len(groups))
    for g, idx in enumerate(groups):
        a = attention_weights(H[idx], params.subbag_attention)
        pooled = attend_pool(H[idx], a)
        pseudo_preds[g] = nn.sigmoid(params.subbag_classifier.logit(pooled))
        dist[g] = pooled                       # AFS: attention-weighted feature
    A = attention_weights(dist, params.bag_attention)
    pooled_bag = attend_pool(dist, A)
    prob = float(nn.sigmoid(params.bag_classifier.logit(pooled_bag)))
    return prob, pseudo_preds, groups


def dtfd_compute_gradients(batch, params: ModelParams, pseudo_bag_count: int,
                           rng: np.random.Generator, bag_weight: float = 1.0):
    """Joint tier-1 + bag loss gradients over flat bags with random partitions."""
    if not batch:
        raise InvalidInputError("empty batch")
    n_vol = len(batch)
    total_pseudo = n_vol * pseudo_bag_count
    pa, pc = params.subbag_attention, params.subbag_classifier
    ba, bc = params.bag_attention, params.bag_classifier
    grads = {k: np.zeros_like(v) for k, v in params.named_arrays().items()}
    sub_sum = bag_sum = 0.0
    preds = []

    for instances, label in batch:
        y = _check_label(label)
        instances = np.asarray(instances)
        groups = random_even_partition(instances.shape[0], pseudo_bag_count, rng)
        H, enc_cache = params.encoder.forward(instances, training=True)
        n = len(groups)
        L = H.shape[1]

        Ts, alphas, pooleds = [], [], []
        dist = np.empty((n, L), dtype=H.dtype)
        p_sub = np.empty(n)
        for g, idx in enumerate(groups):
            T = np.tanh(H[idx] @ pa.V.T)
            a = nn.softmax(T @ pa.w)
            pooled = a @ H[idx]
            Ts.append(T); alphas.append(a); pooleds.append(pooled)
            dist[g] = pooled
            p_sub[g] = nn.sigmoid(pc.logit(pooled))
        T2 = np.tanh(dist @ ba.V.T)
        A = nn.softmax(T2 @ ba.w)
        pooled_bag = A @ dist
        p_bag = float(nn.sigmoid(bc.logit(pooled_bag)))

        sub_sum += sum(bce(p, y) for p in p_sub)
        bag_sum += bce(p_bag, y)
        preds.append(p_bag)

        # bag tier backward
        dz_bag = float(_bce_logit_grad(np.asarray(p_bag), y)) * bag_weight / n_vol
        grads["bag_classifier.weight"] += dz_bag * pooled_bag
        if bc.bias_enabled:
            grads["bag_classifier.bias"] += dz_bag
        dpooled_bag = dz_bag * bc.weight
        ddist = A[:, None] * dpooled_bag[None, :]
        dA = dist @ dpooled_bag
        dlog2 = nn.softmax_backward(A, dA)
        grads["bag_attention.w"] += T2.T @ dlog2
        dU2 = (dlog2[:, None] * ba.w[None, :]) * (1.0 - T2 * T2)
        grads["bag_attention.V"] += dU2.T @ dist
        ddist += dU2 @ ba.V

        # tier-1 backward per pseudo-bag
        dz_sub = _bce_logit_grad(p_sub, y) / total_pseudo
        dH_flat = np.zeros_like(H)
        for g, idx in enumerate(groups):
            dpooled = dz_sub[g] * pc.weight + ddist[g]
            grads["subbag_classifier.weight"] += dz_sub[g] * pooleds[g]
            if pc.bias_enabled:
                grads["subbag_classifier.bias"] += dz_sub[g]
            Hg, T, a = H[idx], Ts[g], alphas[g]
            dHg = a[:, None] * dpooled[None, :]
            da = Hg @ dpooled
            dlog = nn.softmax_backward(a, da)
            grads["subbag_attention.w"] += T.T @ dlog
            dU = (dlog[:, None] * pa.w[None, :]) * (1.0 - T * T)
            grads["subbag_attention.V"] += dU.T @ Hg
            dHg += dU @ pa.V
            dH_flat[idx] += dHg
        for k, v in params.encoder.backward(enc_cache, dH_flat).items():
            grads[f"encoder.{k}"] += v

    _check_grads_finite(grads)
    info = {"subbag_loss": sub_sum / total_pseudo, "bag_loss": bag_sum / n_vol,
            "bag_predictions": preds}
    info["joint_loss"] = info["subbag_loss"] + bag_weight * info["bag_loss"]
    return grads, info


# --- fully supervised 3D ------------------------------------------------------------------

def prepare_supervised_input(volume: Volume, margin: int = 30,
                             out_shape: tuple[int, int, int] = (96, 96, 32)) -> np.ndarray:
    """Mask-normalized, mask-cropped (in-plane margin only), trilinearly
    resampled volume ready for the 3D encoder."""
    vox, mask = crop_subvolume_with_mask(volume, margin=margin)
    vals = vox[mask].astype(np.float64)
    std = vals.std()
    if std < 1e-12:
        raise InvalidInputError(f"volume {volume.id}: constant over mask")
    vox = (vox.astype(np.float64) - vals.mean()) / std
    factors = [t / s for t, s in zip(out_shape, vox.shape)]
    return ndimage.zoom(vox, factors, order=1, mode="nearest").astype(np.float32)


def fully_supervised_forward(prepared: np.ndarray, encoder3d: Encoder) -> float:
    """Resampled subvolume -> sigmoid probability."""
    logit = encoder3d.encode(prepared[None].astype(encoder3d.dtype))
    return float(nn.sigmoid(logit[0, 0]))


def supervised_compute_gradients(batch, encoder3d: Encoder):
    """Mean-BCE gradients for the 3D baseline over prepared arrays."""
    if not batch:
        raise InvalidInputError("empty batch")
    n = len(batch)
    grads = {f"encoder.{k}": np.zeros_like(v) for k, v in encoder3d.params.items()}
    total = 0.0
    preds = []
    for prepared, label in batch:
        y = _check_label(label)
        logit, cache = encoder3d.forward(
            np.asarray(prepared, dtype=encoder3d.dtype)[None], training=True)
        p = float(nn.sigmoid(logit[0, 0]))
        total += bce(p, y)
        preds.append(p)
        dz = float(_bce_logit_grad(np.asarray(p), y)) / n
        dlogit = np.array([[dz]], dtype=encoder3d.dtype)
        for k, v in encoder3d.backward(cache, dlogit).items():
            grads[f"encoder.{k}"] += v
    _check_grads_finite(grads)
    info = {"joint_loss": total / n, "subbag_loss": 0.0, "bag_loss": total / n,
            "bag_predictions": preds}
    return grads, info


def _check_grads_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFailureError("non-finite gradient", detail=name)
