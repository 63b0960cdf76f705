"""Training loop: Adam + cosine annealing + early stopping on validation AUROC.

One volume is one gradient step by default (``bags_per_step`` averages
gradients when larger).  Sub-bags are resampled every epoch for training;
validation uses a fixed per-volume stream so the AUROC series is comparable
across epochs.  Runs are deterministic given (config, manifest): every
random draw comes from a SeedSequence rooted at the run seed with documented
stream tags (0 init, 1 training sampling, 2 epoch shuffle, 3 validation
sampling, 4 test-time sampling).

The checkpoint container is a single file: a line-oriented text header
(format version, family, architecture descriptor, config echo, epoch, best
validation AUROC, seed, named-tensor table with dtype/shape/offset) closed
by an ``END-HEADER`` marker, followed by the raw little-endian tensor blob
whose sha256 the header records.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .data import Manifest, Volume, load_volume, normalize_volume
from .errors import (CheckpointDigestError, CheckpointFormatError,
                     CheckpointVersionError, ConfigurationError,
                     DescriptorMismatchError, NumericFailureError)
from .evaluation import auroc, compute_metrics, MetricReport
from .models import ModelSpec, build_harness, spec_from_descriptor

CHECKPOINT_MAGIC = "hiermil-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe; defaults follow the experimental protocol
    (50 epochs, Adam at 1e-4, patience 8, cosine annealing, 6 sub-bags of
    60 instances)."""
    epochs: int = 50
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eta_min: float = 0.0
    patience: int = 8
    bags_per_step: int = 1
    M: int = 6
    K: int = 60
    seed: int = 0
    loss_weight_lambda: float = 1.0
    distill_mode: str = "attention_weighted"
    precision: str = "float32"       # or "float64" for bit-stable reruns

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0 < self.patience < self.epochs:
            raise ConfigurationError("patience must satisfy 0 < patience < epochs")
        if self.bags_per_step < 1 or self.M < 1 or self.K < 1:
            raise ConfigurationError("bags_per_step, M and K must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError(f"unknown precision {self.precision!r}")
        if self.distill_mode not in ("attention_weighted", "mean"):
            raise ConfigurationError(f"unknown distill_mode {self.distill_mode!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def cosine_lr(cfg: TrainConfig, epoch: int) -> float:
    """eta_min + (lr - eta_min) (1 + cos(pi t / T)) / 2 with t the epoch index."""
    t = min(max(epoch, 0), cfg.epochs)
    return cfg.eta_min + 0.5 * (cfg.learning_rate - cfg.eta_min) * (
        1.0 + np.cos(np.pi * t / cfg.epochs))


class Adam:
    """Plain Adam with bias correction; state per named tensor."""

    def __init__(self, cfg: TrainConfig):
        self.beta1, self.beta2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


# --- rng streams ---------------------------------------------------------------------

def _stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *tags])))


def train_rng(seed: int, epoch: int, ordinal: int) -> np.random.Generator:
    return _stream(seed, 1, epoch, ordinal)


def val_rng(seed: int, ordinal: int) -> np.random.Generator:
    return _stream(seed, 3, ordinal)


def test_rng(seed: int, ordinal: int, replicate: int = 0) -> np.random.Generator:
    return _stream(seed, 4, ordinal, replicate)


# --- training ------------------------------------------------------------------------

@dataclass
class TrainResult:
    harness: object
    history: list[dict]
    best_epoch: int
    best_val_auroc: float
    checkpoint_path: Path | None = None
    config: TrainConfig | None = None


def load_split_volumes(manifest: Manifest, split: str) -> list[Volume]:
    return [normalize_volume(load_volume(manifest.volume_path(vid)))
            for vid in manifest.ids(split)]


def train(manifest: Manifest, model_spec: ModelSpec, cfg: TrainConfig,
          out_dir=None, log=None) -> TrainResult:
    """Run the full recipe; returns the best-validation-AUROC model.

    Writes ``config.txt`` (effective config echo, before any work),
    ``history.csv``, ``last.ckpt`` (every epoch) and ``best.ckpt`` into
    ``out_dir`` when given.
    """
    cfg.validate()
    model_spec.validate()
    train_vols = load_split_volumes(manifest, "train")
    val_vols = load_split_volumes(manifest, "val")
    if not train_vols or not val_vols:
        raise ConfigurationError("manifest needs non-empty train and val splits")
    val_labels = [v.label for v in val_vols]
    if len(set(val_labels)) < 2:
        raise ConfigurationError("validation split must contain both classes")

    init_seed = int(np.random.SeedSequence([cfg.seed, 0]).generate_state(1)[0])
    harness = build_harness(model_spec, cfg.M, cfg.K, distill_mode=cfg.distill_mode,
                            bag_weight=cfg.loss_weight_lambda, seed=init_seed,
                            dtype=cfg.dtype)
    params = harness.named_arrays()
    adam = Adam(cfg)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_config_echo(out_dir / "config.txt", cfg, model_spec)

    def validation_auroc() -> float:
        preds = [harness.predict(v, val_rng(cfg.seed, i)) for i, v in enumerate(val_vols)]
        return auroc(preds, val_labels)

    history: list[dict] = []
    best = -np.inf
    best_epoch = 0
    best_state: dict[str, np.ndarray] = {}
    best_buffers: dict[str, np.ndarray] = {}
    no_improve = 0

    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg, epoch)
        order = _stream(cfg.seed, 2, epoch).permutation(len(train_vols))
        sums = {"joint_loss": 0.0, "subbag_loss": 0.0, "bag_loss": 0.0}
        pending: dict[str, np.ndarray] | None = None
        pending_n = 0
        for ordinal in order:
            vol = train_vols[int(ordinal)]
            try:
                grads, info = harness.loss_and_grads(vol, train_rng(cfg.seed, epoch, int(ordinal)))
            except NumericFailureError as exc:
                raise NumericFailureError(
                    "non-finite loss or gradient during training",
                    detail=f"epoch {epoch + 1}, volume {vol.id}: {exc.detail}") from exc
            for key in sums:
                sums[key] += info.get(key, 0.0)
            if pending is None:
                pending = grads
            else:
                for k in pending:
                    pending[k] += grads[k]
            pending_n += 1
            if pending_n == cfg.bags_per_step:
                if pending_n > 1:
                    for k in pending:
                        pending[k] /= pending_n
                adam.step(params, pending, lr)
                pending, pending_n = None, 0
        if pending is not None:      # leftover partial accumulation group
            for k in pending:
                pending[k] /= pending_n
            adam.step(params, pending, lr)

        val_score = float(validation_auroc())
        n = len(train_vols)
        row = {"epoch": epoch + 1,
               "train_loss": float(sums["joint_loss"]) / n,
               "subbag_loss": float(sums["subbag_loss"]) / n,
               "bag_loss": float(sums["bag_loss"]) / n,
               "val_auroc": val_score,
               "learning_rate": float(lr)}
        history.append(row)
        if log:
            log(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.4f}  "
                f"val_auroc {val_score:.4f}  lr {lr:.2e}")

        improved = val_score > best
        if improved:
            best = val_score
            best_epoch = epoch + 1
            best_state = {k: v.copy() for k, v in params.items()}
            best_buffers = {k: v.copy() for k, v in harness.named_buffers().items()}
            no_improve = 0
        else:
            no_improve += 1

        if out_dir is not None:
            save_checkpoint(out_dir / "last.ckpt", harness, cfg, epoch + 1, best)
            if improved:
                _save_state_checkpoint(out_dir / "best.ckpt", harness, cfg,
                                       best_epoch, best, best_state, best_buffers)
        if no_improve >= cfg.patience:
            break

    # training always restores the best-validation parameters
    for k, v in params.items():
        v[...] = best_state[k]
    for k, v in harness.named_buffers().items():
        v[...] = best_buffers[k]

    if out_dir is not None:
        write_history_csv(out_dir / "history.csv", history)
    return TrainResult(harness=harness, history=history, best_epoch=best_epoch,
                       best_val_auroc=float(best),
                       checkpoint_path=(out_dir / "best.ckpt") if out_dir else None,
                       config=cfg)


def write_history_csv(path, history: list[dict]) -> Path:
    import csv
    cols = ["epoch", "train_loss", "subbag_loss", "bag_loss", "val_auroc", "learning_rate"]
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in cols})
    return path


def write_config_echo(path, cfg: TrainConfig, model_spec: ModelSpec) -> Path:
    payload = {"train": asdict(cfg), "model": _spec_dict(model_spec)}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return Path(path)


def _spec_dict(spec: ModelSpec) -> dict:
    d = asdict(spec)
    d["encoder"]["channels"] = list(spec.encoder.channels)
    d["supervised_shape"] = list(spec.supervised_shape)
    return d


# --- checkpoints ------------------------------------------------------------------------

@dataclass
class Checkpoint:
    family: str
    descriptor: dict
    config: dict
    arrays: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    best_val_auroc: float = 0.0
    seed: int = 0


def save_checkpoint(path, harness, cfg: TrainConfig, epoch: int,
                    best_val_auroc: float) -> Path:
    return _save_state_checkpoint(path, harness, cfg, epoch, best_val_auroc,
                                  harness.named_arrays(), harness.named_buffers())


def _save_state_checkpoint(path, harness, cfg, epoch, best_val_auroc,
                           arrays, buffers) -> Path:
    path = Path(path)
    named = dict(sorted(arrays.items()))
    named.update({f"buffer:{k}": v for k, v in sorted(buffers.items())})
    blob = bytearray()
    table = []
    for name, arr in named.items():
        raw = np.ascontiguousarray(arr).tobytes()
        table.append((name, str(arr.dtype), "x".join(map(str, arr.shape or (1,))),
                      len(blob), len(raw)))
        blob.extend(raw)
    digest = hashlib.sha256(bytes(blob)).hexdigest()
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"family: {harness.family}",
        f"descriptor: {json.dumps(harness.descriptor(), sort_keys=True)}",
        f"config: {json.dumps(asdict(cfg), sort_keys=True)}",
        f"epoch: {epoch}",
        f"best_val_auroc: {best_val_auroc!r}",
        f"seed: {cfg.seed}",
        f"tensors: {len(table)}",
    ]
    lines += [f"{n} {d} {s} {o} {nb}" for n, d, s, o, nb in table]
    lines.append(f"blob_sha256: {digest}")
    lines.append("END-HEADER")
    path.write_bytes("\n".join(lines).encode() + b"\n" + bytes(blob))
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    marker = b"END-HEADER\n"
    cut = raw.find(marker)
    if cut < 0:
        raise CheckpointFormatError(f"{path}: missing END-HEADER marker")
    header_lines = raw[:cut].decode().splitlines()
    blob = raw[cut + len(marker):]
    if not header_lines or not header_lines[0].startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError(f"{path}: not a hiermil checkpoint")
    version = header_lines[0].split()[-1]
    if version != str(CHECKPOINT_VERSION):
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")

    fields: dict[str, str] = {}
    table: list[tuple[str, str, str, int, int]] = []
    n_tensors = None
    i = 1
    while i < len(header_lines):
        line = header_lines[i]
        i += 1
        key, _, value = line.partition(":")
        if n_tensors is None:
            fields[key.strip()] = value.strip()
            if key.strip() == "tensors":
                n_tensors = int(value)
                for j in range(n_tensors):
                    name, dt, shape, off, nb = header_lines[i + j].split()
                    table.append((name, dt, shape, int(off), int(nb)))
                i += n_tensors
        else:
            fields[key.strip()] = value.strip()

    if "blob_sha256" not in fields:
        raise CheckpointFormatError(f"{path}: header missing blob_sha256")
    if hashlib.sha256(blob).hexdigest() != fields["blob_sha256"]:
        raise CheckpointDigestError(f"{path}: tensor blob does not match recorded digest")

    arrays: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, dt, shape_s, off, nb in table:
        shape = tuple(int(t) for t in shape_s.split("x"))
        arr = np.frombuffer(blob[off:off + nb], dtype=np.dtype(dt)).reshape(shape).copy()
        if name.startswith("buffer:"):
            buffers[name[len("buffer:"):]] = arr
        else:
            arrays[name] = arr
    try:
        descriptor = json.loads(fields["descriptor"])
        config = json.loads(fields["config"])
    except (KeyError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: bad descriptor/config ({exc})") from exc
    return Checkpoint(family=fields.get("family", descriptor.get("family", "")),
                      descriptor=descriptor, config=config, arrays=arrays,
                      buffers=buffers, epoch=int(fields.get("epoch", 0)),
                      best_val_auroc=float(fields.get("best_val_auroc", 0.0)),
                      seed=int(fields.get("seed", 0)))


def harness_from_checkpoint(ckpt: Checkpoint, expect_spec: ModelSpec | None = None):
    """Rebuild the model and load its tensors; incompatible shapes fail loudly."""
    spec = expect_spec if expect_spec is not None else spec_from_descriptor(ckpt.descriptor)
    cfg = TrainConfig(**ckpt.config)
    init_seed = int(np.random.SeedSequence([cfg.seed, 0]).generate_state(1)[0])
    harness = build_harness(spec, cfg.M, cfg.K, distill_mode=cfg.distill_mode,
                            bag_weight=cfg.loss_weight_lambda, seed=init_seed,
                            dtype=cfg.dtype)
    params = harness.named_arrays()
    if set(params) != set(ckpt.arrays):
        raise DescriptorMismatchError(
            f"checkpoint tensors do not match the {spec.family} architecture "
            f"(missing: {sorted(set(params) - set(ckpt.arrays))[:3]}..., "
            f"unexpected: {sorted(set(ckpt.arrays) - set(params))[:3]}...)")
    for name, arr in params.items():
        stored = ckpt.arrays[name]
        if stored.shape != arr.shape:
            raise DescriptorMismatchError(
                f"tensor {name}: checkpoint shape {stored.shape} vs model {arr.shape}")
        arr[...] = stored.astype(arr.dtype)
    for name, buf in harness.named_buffers().items():
        if name in ckpt.buffers:
            buf[...] = ckpt.buffers[name].astype(buf.dtype)
    return harness, cfg


# --- repeated runs -------------------------------------------------------------------------

@dataclass
class RepeatReport:
    reports: list[MetricReport]
    seeds: list[int]

    def mean_std_rows(self) -> dict[str, str]:
        from .evaluation import format_mean_std
        return {metric: format_mean_std([getattr(r, metric) for r in self.reports])
                for metric in ("accuracy", "auroc", "f1")}


def evaluate_on_split(harness, manifest: Manifest, split: str, seed: int,
                      rng_fn=None, replicates: int = 3) -> MetricReport:
    """Metrics on one split.

    The reported prediction per volume is the mean over ``replicates``
    independent sub-bag draws, which removes most of the variance of a single
    random slice draw.  Validation re-evaluation passes ``val_rng`` and
    ``replicates=1`` to reproduce the recorded model-selection AUROC.
    """
    rng_fn = rng_fn or test_rng
    vols = load_split_volumes(manifest, split)
    preds = []
    for i, v in enumerate(vols):
        if replicates == 1:
            preds.append(harness.predict(v, rng_fn(seed, i)))
        else:
            preds.append(float(np.mean([harness.predict(v, rng_fn(seed, i, rep))
                                        for rep in range(replicates)])))
    return compute_metrics(preds, [v.label for v in vols])


def run_repeats(manifest: Manifest, model_spec: ModelSpec, cfg: TrainConfig,
                n_runs: int = 3, split: str = "test", log=None) -> RepeatReport:
    """Train n times with seeds (seed, seed+1, ...) and report mean +/- std."""
    if n_runs < 1:
        raise ConfigurationError("n_runs must be >= 1")
    reports, seeds = [], []
    from dataclasses import replace as dc_replace
    for k in range(n_runs):
        run_cfg = dc_replace(cfg, seed=cfg.seed + k)
        result = train(manifest, model_spec, run_cfg, log=log)
        reports.append(evaluate_on_split(result.harness, manifest, split, run_cfg.seed))
        seeds.append(run_cfg.seed)
        if log:
            r = reports[-1]
            log(f"run seed={run_cfg.seed}: acc {r.accuracy:.3f} auroc {r.auroc:.3f} f1 {r.f1:.3f}")
    return RepeatReport(reports=reports, seeds=seeds)
