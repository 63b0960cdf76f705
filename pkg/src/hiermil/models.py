"""Uniform train/eval harnesses for the four model families.

Every harness exposes named parameter arrays (live references the optimizer
updates in place), a per-volume ``loss_and_grads``, a ``predict``, and a
serialisable descriptor.  The MIL families share the sub-bag sampler, so a
benchmark run differs only in how instances are grouped and pooled:

* ``hamil``       - slice-aligned sub-bags, two attention tiers.
* ``abmil``       - the same patches as one flat bag, single tier.
* ``dtfd``        - the same patches, random pseudo-bags, two tiers.
* ``supervised3d``- no patches at all; cropped resampled volume into a 3D CNN.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines, mil
from .data import Volume, eligible_slices, sample_subbags
from .encoder import Encoder, EncoderConfig, build_encoder_3d
from .errors import ConfigurationError
from .evaluation import PatchRegime, VolumeRegime, flop_cost

MODEL_FAMILIES = ("hamil", "abmil", "dtfd", "supervised3d")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture-side configuration (training hyperparameters live in
    TrainConfig)."""
    family: str = "hamil"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention_dim: int = 64
    pseudo_bag_count: int = 6
    supervised_margin: int = 30
    supervised_shape: tuple[int, int, int] = (96, 96, 32)
    bias_enabled: bool = True

    def validate(self) -> None:
        if self.family not in MODEL_FAMILIES:
            raise ConfigurationError(
                f"unknown model family {self.family!r}; expected one of {MODEL_FAMILIES}")
        self.encoder.validate()
        if self.attention_dim < 1:
            raise ConfigurationError("attention_dim must be >= 1")
        if self.family == "dtfd" and self.pseudo_bag_count < 2:
            raise ConfigurationError("dtfd needs pseudo_bag_count >= 2")


class _MilHarness:
    """Shared machinery for the patch-based families."""

    family = "hamil"

    def __init__(self, spec: ModelSpec, M: int, K: int, distill_mode: str,
                 bag_weight: float, seed: int, dtype):
        spec.validate()
        self.spec = spec
        self.M, self.K = int(M), int(K)
        self.distill_mode = distill_mode
        self.bag_weight = float(bag_weight)
        self.dtype = np.dtype(dtype)
        self.params = mil.init_model_params(
            spec.encoder, attention_dim=spec.attention_dim, seed=seed,
            dtype=dtype, bias_enabled=spec.bias_enabled)
        self._slice_tables: dict[str, dict] = {}

    # -- shared plumbing ------------------------------------------------------

    def named_arrays(self):
        return self.params.named_arrays()

    def named_buffers(self):
        return self.params.named_buffers()

    def descriptor(self) -> dict:
        return {"family": self.family,
                "encoder": self.params.encoder.descriptor(),
                "attention_dim": self.spec.attention_dim,
                "pseudo_bag_count": self.spec.pseudo_bag_count,
                "bias_enabled": self.spec.bias_enabled,
                "distill_mode": self.distill_mode}

    def flops(self) -> float:
        regime = PatchRegime(self.M, self.K, self.spec.encoder.in_rows,
                             self.spec.encoder.in_cols)
        return flop_cost(self.descriptor(), regime).total

    def sample(self, volume: Volume, rng: np.random.Generator):
        cfg = self.spec.encoder
        table = self._slice_tables.get(volume.id)
        if table is None:
            table = eligible_slices(volume, cfg.in_rows, cfg.in_cols)
            self._slice_tables[volume.id] = table
        return sample_subbags(volume, self.M, self.K, cfg.in_rows, cfg.in_cols,
                              rng, slice_table=table)


class HamilHarness(_MilHarness):
    family = "hamil"

    def loss_and_grads(self, volume: Volume, rng: np.random.Generator):
        sb = self.sample(volume, rng)
        return mil.compute_gradients([(sb.patches.astype(self.dtype), sb.label)],
                                     self.params, distill_mode=self.distill_mode,
                                     bag_weight=self.bag_weight)

    def predict(self, volume: Volume, rng: np.random.Generator) -> float:
        return self.trace(volume, rng)[0].bag_prediction

    def trace(self, volume: Volume, rng: np.random.Generator):
        sb = self.sample(volume, rng)
        tr = mil.hamil_forward(sb.patches.astype(self.dtype), self.params,
                               distill_mode=self.distill_mode, volume_id=volume.id)
        return tr, sb


class AbmilHarness(_MilHarness):
    family = "abmil"

    def _flat(self, volume, rng):
        sb = self.sample(volume, rng)
        r, c = self.spec.encoder.in_rows, self.spec.encoder.in_cols
        return sb, sb.patches.reshape(self.M * self.K, r, c).astype(self.dtype)

    def loss_and_grads(self, volume: Volume, rng: np.random.Generator):
        sb, flat = self._flat(volume, rng)
        return baselines.abmil_compute_gradients([(flat, sb.label)], self.params)

    def predict(self, volume: Volume, rng: np.random.Generator) -> float:
        _, flat = self._flat(volume, rng)
        return baselines.abmil_forward(flat, self.params)[0]

    def trace(self, volume: Volume, rng: np.random.Generator):
        sb, flat = self._flat(volume, rng)
        prob, attention, _pooled = baselines.abmil_forward(flat, self.params)
        tr = mil.ForwardTrace(
            embeddings=np.empty((0,)), instance_attention=attention.reshape(self.M, self.K),
            subbag_predictions=np.array([prob]), pooled=np.empty((0,)),
            distilled=np.empty((0,)), subbag_attention=np.ones(self.M) / self.M,
            bag_prediction=prob, volume_id=volume.id)
        return tr, sb


class DtfdHarness(_MilHarness):
    family = "dtfd"

    def _flat(self, volume, rng):
        sb = self.sample(volume, rng)
        r, c = self.spec.encoder.in_rows, self.spec.encoder.in_cols
        return sb, sb.patches.reshape(self.M * self.K, r, c).astype(self.dtype)

    def loss_and_grads(self, volume: Volume, rng: np.random.Generator):
        sb, flat = self._flat(volume, rng)
        return baselines.dtfd_compute_gradients(
            [(flat, sb.label)], self.params, self.spec.pseudo_bag_count, rng,
            bag_weight=self.bag_weight)

    def predict(self, volume: Volume, rng: np.random.Generator) -> float:
        _, flat = self._flat(volume, rng)
        return baselines.dtfd_afs_forward(flat, self.spec.pseudo_bag_count,
                                          rng, self.params)[0]


class Supervised3dHarness:
    family = "supervised3d"

    def __init__(self, spec: ModelSpec, M: int, K: int, distill_mode: str,
                 bag_weight: float, seed: int, dtype):
        spec.validate()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rows, cols, slcs = spec.supervised_shape
        cfg = replace(spec.encoder, in_rows=rows, in_cols=cols, in_slices=slcs,
                      seed=int(np.random.SeedSequence(seed).generate_state(1)[0]))
        self.encoder: Encoder = build_encoder_3d(cfg, dtype=dtype)
        self._prepared: dict[str, np.ndarray] = {}

    def named_arrays(self):
        return {f"encoder.{k}": v for k, v in self.encoder.params.items()}

    def named_buffers(self):
        return {f"encoder.{k}": v for k, v in self.encoder.buffers.items()}

    def descriptor(self) -> dict:
        return {"family": self.family, "encoder": self.encoder.descriptor(),
                "supervised_margin": self.spec.supervised_margin,
                "supervised_shape": list(self.spec.supervised_shape)}

    def flops(self) -> float:
        rows, cols, slcs = self.spec.supervised_shape
        return flop_cost(self.descriptor(), VolumeRegime(rows, cols, slcs)).total

    def prepare(self, volume: Volume) -> np.ndarray:
        arr = self._prepared.get(volume.id)
        if arr is None:
            arr = baselines.prepare_supervised_input(
                volume, margin=self.spec.supervised_margin,
                out_shape=self.spec.supervised_shape)
            self._prepared[volume.id] = arr
        return arr

    def loss_and_grads(self, volume: Volume, rng: np.random.Generator):
        return baselines.supervised_compute_gradients(
            [(self.prepare(volume), volume.label)], self.encoder)

    def predict(self, volume: Volume, rng: np.random.Generator) -> float:
        return baselines.fully_supervised_forward(self.prepare(volume), self.encoder)


_HARNESSES = {"hamil": HamilHarness, "abmil": AbmilHarness,
              "dtfd": DtfdHarness, "supervised3d": Supervised3dHarness}


def build_harness(spec: ModelSpec, M: int, K: int, distill_mode: str = "attention_weighted",
                  bag_weight: float = 1.0, seed: int = 0, dtype=np.float32):
    spec.validate()
    cls = _HARNESSES[spec.family]
    return cls(spec, M, K, distill_mode, bag_weight, seed, dtype)


def spec_from_descriptor(desc: dict) -> ModelSpec:
    """Rebuild a ModelSpec from a checkpoint descriptor."""
    enc = desc["encoder"]
    cfg = EncoderConfig(
        in_rows=enc["in_rows"], in_cols=enc["in_cols"], channels=tuple(enc["channels"]),
        num_blocks=enc["num_blocks"], embedding_dim=enc["embedding_dim"],
        norm_kind=enc["norm_kind"], num_groups=enc.get("num_groups", 8),
        stem_stride=enc.get("stem_stride", 1), seed=enc.get("seed", 0),
        in_slices=enc.get("in_slices"))
    return ModelSpec(
        family=desc["family"], encoder=cfg,
        attention_dim=desc.get("attention_dim", 64),
        pseudo_bag_count=desc.get("pseudo_bag_count", 6),
        supervised_margin=desc.get("supervised_margin", 30),
        supervised_shape=tuple(desc.get("supervised_shape", (96, 96, 32))),
        bias_enabled=desc.get("bias_enabled", True))
