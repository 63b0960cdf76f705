"""Two-tier attention MIL core: pooling, distillation, losses, gradients.

A volume is a bag; each sampled axial slice contributes a sub-bag of K patch
instances.  The sub-bag tier scores instances with gated-tanh attention,
pools them, and emits a per-slice quality probability; a distilled feature
per sub-bag then feeds an identical attention/classifier pair at the bag
tier, which emits the volume-level probability.  Training minimises the sum
of the two binary cross-entropy terms, with every sub-bag inheriting its
volume's label.

All functions are pure in (inputs, parameters); ``compute_gradients`` runs
handwritten reverse-mode differentiation through both tiers and the shared
patch encoder and is validated against central finite differences in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .encoder import Encoder, EncoderConfig, build_encoder
from .errors import (ConfigurationError, ContractViolationError,
                     InvalidInputError, NumericFailureError)

BCE_EPS = 1e-7

DISTILL_MODES = ("attention_weighted", "mean")


# --- parameter containers -----------------------------------------------------

@dataclass
class AttentionParams:
    """Gated-tanh attention: score(h) = w . tanh(V h)."""
    V: np.ndarray   # [D, L]
    w: np.ndarray   # [D]


@dataclass
class ClassifierParams:
    weight: np.ndarray        # [L]
    bias: np.ndarray          # shape (1,); ignored when bias_enabled is False
    bias_enabled: bool = True

    def logit(self, pooled: np.ndarray) -> np.ndarray:
        z = pooled @ self.weight
        if self.bias_enabled:
            z = z + self.bias[0]
        return z


@dataclass
class ModelParams:
    """All learnable state of the hierarchical model.

    The sub-bag tier's attention and classifier are shared across every
    sub-bag of every volume; the bag tier has its own independent pair.
    """
    encoder: Encoder
    subbag_attention: AttentionParams
    subbag_classifier: ClassifierParams
    bag_attention: AttentionParams
    bag_classifier: ClassifierParams

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({
            "subbag_attention.V": self.subbag_attention.V,
            "subbag_attention.w": self.subbag_attention.w,
            "subbag_classifier.weight": self.subbag_classifier.weight,
            "subbag_classifier.bias": self.subbag_classifier.bias,
            "bag_attention.V": self.bag_attention.V,
            "bag_attention.w": self.bag_attention.w,
            "bag_classifier.weight": self.bag_classifier.weight,
            "bag_classifier.bias": self.bag_classifier.bias,
        })
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"encoder.{k}": v for k, v in self.encoder.buffers.items()}


@dataclass
class SubBagOutput:
    prediction: float
    attention: np.ndarray    # [K], simplex
    pooled: np.ndarray       # [L]
    distilled: np.ndarray    # [L]


@dataclass
class BagOutput:
    prediction: float
    subbag_attention: np.ndarray  # [M], simplex


@dataclass
class ForwardTrace:
    """Everything one volume produced on its way to a bag prediction."""
    embeddings: np.ndarray          # [M, K, L]
    instance_attention: np.ndarray  # [M, K]
    subbag_predictions: np.ndarray  # [M]
    pooled: np.ndarray              # [M, L]
    distilled: np.ndarray           # [M, L]
    subbag_attention: np.ndarray    # [M]
    bag_prediction: float
    volume_id: str = ""


def init_model_params(encoder_config: EncoderConfig, attention_dim: int = 64,
                      seed: int = 0, dtype=np.float32,
                      bias_enabled: bool = True) -> ModelParams:
    """Fresh parameters for both tiers; deterministic in ``seed``."""
    ss = np.random.SeedSequence(seed)
    enc_seed, head_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    enc = build_encoder(replace(encoder_config, seed=enc_seed), dtype=dtype)
    rng = np.random.Generator(np.random.PCG64(head_seed))
    L, D = encoder_config.embedding_dim, attention_dim
    dt = np.dtype(dtype)

    def attn():
        return AttentionParams(
            V=(rng.standard_normal((D, L)) / np.sqrt(L)).astype(dt),
            w=(rng.standard_normal(D) / np.sqrt(D)).astype(dt))

    def clf():
        return ClassifierParams(
            weight=(rng.standard_normal(L) / np.sqrt(L)).astype(dt),
            bias=np.zeros(1, dtype=dt), bias_enabled=bias_enabled)

    return ModelParams(encoder=enc, subbag_attention=attn(), subbag_classifier=clf(),
                       bag_attention=attn(), bag_classifier=clf())


# --- tier operations ------------------------------------------------------------

def _check_embeddings(H: np.ndarray, p: AttentionParams) -> np.ndarray:
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] < 1:
        raise ContractViolationError(f"expected K x L embedding matrix, got shape {H.shape}")
    if H.shape[1] != p.V.shape[1]:
        raise ContractViolationError(
            f"embedding dim {H.shape[1]} does not match attention V {p.V.shape}")
    if not np.all(np.isfinite(H)):
        raise InvalidInputError("embeddings contain non-finite values")
    return H


def attention_weights(H: np.ndarray, p: AttentionParams) -> np.ndarray:
    """Softmax over w . tanh(V h_k); returns a simplex vector of length K."""
    H = _check_embeddings(H, p)
    logits = np.tanh(H @ p.V.T) @ p.w
    return nn.softmax(logits)


def attend_pool(H: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Convex combination sum_k a_k h_k."""
    H = np.asarray(H)
    a = np.asarray(a)
    if H.ndim != 2 or a.ndim != 1 or H.shape[0] != a.shape[0]:
        raise ContractViolationError(
            f"attend_pool: {H.shape[0] if H.ndim == 2 else '?'} embeddings vs {a.shape[0]} weights")
    return a @ H


def distill(H: np.ndarray, a: np.ndarray, mode: str = "attention_weighted") -> np.ndarray:
    """One representative embedding per sub-bag for the bag tier."""
    if mode not in DISTILL_MODES:
        raise ConfigurationError(f"unknown distill mode {mode!r}; expected one of {DISTILL_MODES}")
    H = np.asarray(H)
    if mode == "mean":
        if H.ndim != 2:
            raise ContractViolationError(f"expected K x L matrix, got {H.shape}")
        return H.mean(axis=0)
    return attend_pool(H, a)


def subbag_forward(H: np.ndarray, params: ModelParams,
                   distill_mode: str = "attention_weighted") -> SubBagOutput:
    """One sub-bag through attention pooling and the sigmoid classifier."""
    a = attention_weights(H, params.subbag_attention)
    pooled = attend_pool(H, a)
    prediction = float(nn.sigmoid(params.subbag_classifier.logit(pooled)))
    return SubBagOutput(prediction=prediction, attention=a, pooled=pooled,
                        distilled=distill(H, a, distill_mode))


def bag_forward(distilled: np.ndarray, params: ModelParams) -> BagOutput:
    """M distilled features through the bag tier's attention and classifier."""
    A = attention_weights(distilled, params.bag_attention)
    pooled = attend_pool(distilled, A)
    prediction = float(nn.sigmoid(params.bag_classifier.logit(pooled)))
    return BagOutput(prediction=prediction, subbag_attention=A)


# --- losses ----------------------------------------------------------------------

def _check_label(label) -> float:
    y = float(label)
    if y not in (0.0, 1.0):
        raise InvalidInputError(f"label must be 0 or 1, got {label!r}")
    return y


def bce(prediction: float, label) -> float:
    """Binary cross-entropy with the prediction clamped to [eps, 1-eps]."""
    y = _check_label(label)
    p = float(prediction)
    if not 0.0 <= p <= 1.0:
        raise InvalidInputError(f"prediction must lie in [0, 1], got {p}")
    p = min(max(p, BCE_EPS), 1.0 - BCE_EPS)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def subbag_loss(subbag_predictions, bag_labels) -> float:
    """Mean BCE over all sub-bags, each inheriting its volume's label.

    ``subbag_predictions`` is an [N, M] array or a ragged list of per-volume
    prediction vectors; normalisation is by the actual total sub-bag count.
    """
    preds = list(subbag_predictions)
    labels = list(bag_labels)
    if len(preds) != len(labels):
        raise ContractViolationError(
            f"{len(preds)} prediction rows vs {len(labels)} labels")
    if not preds:
        raise InvalidInputError("empty batch")
    total, count = 0.0, 0
    for row, y in zip(preds, labels):
        for p in np.atleast_1d(np.asarray(row, dtype=float)):
            total += bce(p, y)
            count += 1
    return total / count


def bag_loss(bag_predictions, bag_labels) -> float:
    """Mean BCE over N volume-level predictions."""
    preds = np.atleast_1d(np.asarray(bag_predictions, dtype=float))
    labels = np.atleast_1d(np.asarray(bag_labels))
    if preds.shape != labels.shape:
        raise ContractViolationError(f"{preds.shape} predictions vs {labels.shape} labels")
    if preds.size == 0:
        raise InvalidInputError("empty batch")
    return float(np.mean([bce(p, y) for p, y in zip(preds, labels)]))


def joint_loss(subbag_term: float, bag_term: float, bag_weight: float = 1.0) -> float:
    """Sum of the two tier losses (bag term optionally reweighted; default 1)."""
    for name, v in (("subbag_term", subbag_term), ("bag_term", bag_term)):
        if not np.isfinite(v) or v < 0:
            raise InvalidInputError(f"{name} must be finite and non-negative, got {v}")
    return float(subbag_term) + float(bag_weight) * float(bag_term)


# --- full model forward -----------------------------------------------------------

def hamil_forward(patches: np.ndarray, params: ModelParams,
                  distill_mode: str = "attention_weighted",
                  volume_id: str = "") -> ForwardTrace:
    """Forward one volume's M x K patch grid through both tiers (inference)."""
    patches = np.asarray(patches)
    if patches.ndim != 4:
        raise ContractViolationError(f"expected patches [M, K, r, c], got shape {patches.shape}")
    M, K, r, c = patches.shape
    H = params.encoder.encode(patches.reshape(M * K, r, c)).reshape(M, K, -1)
    trace, _ = _head_forward(H, params, distill_mode)
    trace.volume_id = volume_id
    return trace


def _head_forward(H: np.ndarray, params: ModelParams, distill_mode: str):
    """Vectorised two-tier head on H: [M, K, L]. Returns (trace, cache)."""
    if distill_mode not in DISTILL_MODES:
        raise ConfigurationError(f"unknown distill mode {distill_mode!r}")
    M, K, L = H.shape
    pa, pc = params.subbag_attention, params.subbag_classifier
    ba, bc = params.bag_attention, params.bag_classifier

    T = np.tanh(H @ pa.V.T)                      # [M, K, D]
    a = nn.softmax(T @ pa.w, axis=1)             # [M, K]
    pooled = np.einsum("mk,mkl->ml", a, H)       # [M, L]
    p_sub = nn.sigmoid(pc.logit(pooled))         # [M]
    dist = pooled if distill_mode == "attention_weighted" else H.mean(axis=1)

    T2 = np.tanh(dist @ ba.V.T)                  # [M, D2]
    A = nn.softmax(T2 @ ba.w)                    # [M]
    pooled_bag = A @ dist                        # [L]
    p_bag = float(nn.sigmoid(bc.logit(pooled_bag)))

    trace = ForwardTrace(embeddings=H, instance_attention=a,
                         subbag_predictions=np.asarray(p_sub, dtype=float),
                         pooled=pooled, distilled=dist, subbag_attention=A,
                         bag_prediction=p_bag)
    cache = (H, T, a, pooled, dist, T2, A, pooled_bag)
    return trace, cache


def _head_backward(cache, params: ModelParams, dz_sub: np.ndarray, dz_bag: float,
                   distill_mode: str):
    """Reverse pass of _head_forward given d(loss)/d(logit) at both tiers.

    Returns (dH, grads) with grads keyed like ModelParams.named_arrays (head
    entries only).
    """
    H, T, a, pooled, dist, T2, A, pooled_bag = cache
    M, K, L = H.shape
    pa, pc = params.subbag_attention, params.subbag_classifier
    ba, bc = params.bag_attention, params.bag_classifier
    dt = H.dtype
    g: dict[str, np.ndarray] = {}

    # bag classifier
    g["bag_classifier.weight"] = dz_bag * pooled_bag
    g["bag_classifier.bias"] = np.array([dz_bag if bc.bias_enabled else 0.0], dtype=dt)
    dpooled_bag = dz_bag * bc.weight                              # [L]

    # bag attention pooling + softmax + gate
    ddist = A[:, None] * dpooled_bag[None, :]                     # [M, L]
    dA = dist @ dpooled_bag                                       # [M]
    dlogits2 = nn.softmax_backward(A, dA)                         # [M]
    g["bag_attention.w"] = T2.T @ dlogits2
    dU2 = (dlogits2[:, None] * ba.w[None, :]) * (1.0 - T2 * T2)   # [M, D2]
    g["bag_attention.V"] = dU2.T @ dist
    ddist += dU2 @ ba.V

    # sub-bag classifier
    g["subbag_classifier.weight"] = dz_sub @ pooled
    g["subbag_classifier.bias"] = np.array(
        [dz_sub.sum() if pc.bias_enabled else 0.0], dtype=dt)
    dpooled = dz_sub[:, None] * pc.weight[None, :]                # [M, L]

    dH = np.zeros_like(H)
    if distill_mode == "attention_weighted":
        dpooled = dpooled + ddist
    else:
        dH += ddist[:, None, :] / K

    # instance attention pooling + softmax + gate
    dH += a[..., None] * dpooled[:, None, :]
    da = np.einsum("mkl,ml->mk", H, dpooled)
    dlogits = nn.softmax_backward(a, da, axis=1)                  # [M, K]
    g["subbag_attention.w"] = np.einsum("mkd,mk->d", T, dlogits)
    dU = (dlogits[..., None] * pa.w[None, None, :]) * (1.0 - T * T)
    g["subbag_attention.V"] = np.einsum("mkd,mkl->dl", dU, H)
    dH += dU @ pa.V
    return dH, g


def _bce_logit_grad(p: np.ndarray, y: float) -> np.ndarray:
    """d bce(sigmoid(z), y) / dz, zero where the clamp saturates."""
    d = p - y
    return np.where((p < BCE_EPS) | (p > 1.0 - BCE_EPS), 0.0, d)


def compute_gradients(batch, params: ModelParams,
                      distill_mode: str = "attention_weighted",
                      bag_weight: float = 1.0):
    """Exact gradients of the joint objective over a batch of volumes.

    ``batch`` is a list of (patches [M, K, r, c], label) pairs; M and K may
    differ between volumes.  Returns (grads, info) where grads matches
    ``params.named_arrays()`` key for key and info carries the loss terms.
    """
    if not batch:
        raise InvalidInputError("empty batch")
    n_volumes = len(batch)
    total_subbags = sum(np.asarray(p).shape[0] for p, _ in batch)

    grads = {k: np.zeros_like(v) for k, v in params.named_arrays().items()}
    sub_sum = 0.0
    bag_sum = 0.0
    bag_preds = []

    for patches, label in batch:
        patches = np.asarray(patches)
        y = _check_label(label)
        M, K, r, c = patches.shape
        flat = patches.reshape(M * K, r, c)
        H_flat, enc_cache = params.encoder.forward(flat, training=True)
        H = H_flat.reshape(M, K, -1)
        trace, head_cache = _head_forward(H, params, distill_mode)

        sub_sum += sum(bce(p, y) for p in trace.subbag_predictions)
        bag_sum += bce(trace.bag_prediction, y)
        bag_preds.append(trace.bag_prediction)

        dz_sub = _bce_logit_grad(trace.subbag_predictions, y) / total_subbags
        dz_bag = float(_bce_logit_grad(np.asarray(trace.bag_prediction), y)) \
            * bag_weight / n_volumes
        dH, head_grads = _head_backward(head_cache, params, dz_sub, dz_bag, distill_mode)
        for k, v in head_grads.items():
            grads[k] += v
        enc_grads = params.encoder.backward(enc_cache, dH.reshape(M * K, -1))
        for k, v in enc_grads.items():
            grads[f"encoder.{k}"] += v

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFailureError("non-finite gradient", detail=name)

    info = {
        "subbag_loss": sub_sum / total_subbags,
        "bag_loss": bag_sum / n_volumes,
        "bag_predictions": bag_preds,
    }
    info["joint_loss"] = joint_loss(info["subbag_loss"], info["bag_loss"], bag_weight)
    return grads, info
