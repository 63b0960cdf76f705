"""Shared test oracles: finite-difference gradient checking and tiny models.

The central-difference probe is only a valid oracle where the objective is
smooth across the step, so ``smooth_batch`` redraws inputs until no ReLU
preactivation lies within a few steps of its kink (the analytic gradient is
exact either way; a kink inside the probe window corrupts the *reference*).
"""

import numpy as np

from hiermil import mil
from hiermil.encoder import EncoderConfig

FD_STEP = 1e-5


def tiny_model(seed=0, L=4, D=3, dtype=np.float64, norm_kind="group"):
    cfg = EncoderConfig(in_rows=8, in_cols=8, channels=(4, 6), num_blocks=1,
                        embedding_dim=L, norm_kind=norm_kind, num_groups=2, seed=seed)
    return mil.init_model_params(cfg, attention_dim=D, seed=seed, dtype=dtype)


def min_relu_preactivation(params, instance_arrays):
    """Smallest |preactivation| over every ReLU the batch touches."""
    smallest = np.inf
    for arr in instance_arrays:
        flat = np.asarray(arr).reshape(-1, arr.shape[-2], arr.shape[-1])
        _, caches = params.encoder.forward(flat, training=True)
        for key, value in caches.items():
            if "relu" in key:
                smallest = min(smallest, float(np.abs(value).min()))
    return smallest


def smooth_batch(params, seed, M=2, K=2, r=8, c=8, n_volumes=1, margin=5e-5):
    """Random (patches, label) batch guaranteed smooth within the FD window."""
    for attempt in range(50):
        gen = np.random.default_rng(seed + 1000 * attempt)
        batch = [(gen.standard_normal((M, K, r, c)), int(gen.integers(0, 2)))
                 for _ in range(n_volumes)]
        if min_relu_preactivation(params, [b[0] for b in batch]) > margin:
            return batch
    raise AssertionError("could not find a kink-free batch; widen the margin")


def fd_max_rel_error(params, batch, distill_mode="attention_weighted",
                     bag_weight=1.0, step=FD_STEP, max_per_tensor=None):
    """Compare compute_gradients against central differences.

    Sweeps every scalar parameter unless ``max_per_tensor`` caps the count.
    Returns the worst relative error (denominator floored at 1e-5, which puts
    an absolute floor of ~1e-9 well above FD noise).
    """
    grads, _ = mil.compute_gradients(batch, params, distill_mode=distill_mode,
                                     bag_weight=bag_weight)
    total_subbags = sum(np.asarray(p).shape[0] for p, _ in batch)

    def loss():
        s = b = 0.0
        for patches, y in batch:
            tr = mil.hamil_forward(patches, params, distill_mode=distill_mode)
            s += sum(mil.bce(p, y) for p in tr.subbag_predictions)
            b += mil.bce(tr.bag_prediction, y)
        return s / total_subbags + bag_weight * b / len(batch)

    worst = 0.0
    worst_name = None
    for name, arr in params.named_arrays().items():
        flat = arr.reshape(-1)
        idx = range(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = np.random.default_rng(hash(name) % (2**32)).choice(
                flat.size, size=max_per_tensor, replace=False)
        g = grads[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = loss()
            flat[i] = orig - step
            lm = loss()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * step)
            rel = abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-5)
            if rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
    return worst, worst_name
