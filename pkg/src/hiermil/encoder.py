"""Residual CNN encoders: patches -> embeddings.

The 2D encoder maps an r x c grayscale patch to an L-dimensional embedding
and is the instance transformation used by every MIL model here.  The 3D
variant shares the topology with volumetric kernels and ends in a single
classification logit; only the fully-supervised baseline uses it.

Topology: stem conv -> stages of residual blocks (conv-norm-relu, conv-norm,
plus identity or projected shortcut) -> global average pool -> linear head.
The desk-scale default (stem 16, stages 16/32/64, one block per stage) keeps
unit tests and synthetic experiments fast; ``resnet10_config`` gives the
four-stage variant with a ten weighted-layer count for realistic runs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace, asdict

import numpy as np

from . import nn
from .errors import ConfigurationError, ContractViolationError

DESCRIPTOR_FAMILY = "residual_encoder"


@dataclass(frozen=True)
class EncoderConfig:
    in_rows: int = 16
    in_cols: int = 16
    channels: tuple[int, ...] = (16, 32, 64)
    num_blocks: int = 1
    embedding_dim: int = 64
    norm_kind: str = "group"          # "group" (deterministic) or "batch"
    num_groups: int = 8
    stem_stride: int = 1
    seed: int = 0
    in_slices: int | None = None      # 3D variant only

    def validate(self) -> None:
        if self.in_rows < 8 or self.in_cols < 8:
            raise ConfigurationError(f"patch size {self.in_rows}x{self.in_cols} below the 8x8 minimum")
        if self.embedding_dim < 2:
            raise ConfigurationError("embedding_dim must be >= 2")
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ConfigurationError(f"channels must be non-empty and positive, got {self.channels}")
        if self.num_blocks < 1:
            raise ConfigurationError("num_blocks must be >= 1")
        if self.norm_kind not in ("group", "batch"):
            raise ConfigurationError(f"unknown norm_kind {self.norm_kind!r}")
        if self.norm_kind == "group" and any(c % self.num_groups for c in self.channels):
            raise ConfigurationError(
                f"num_groups={self.num_groups} must divide every stage width {self.channels}")
        if self.stem_stride not in (1, 2):
            raise ConfigurationError("stem_stride must be 1 or 2")
        if self.in_slices is not None and self.in_slices < 4:
            raise ConfigurationError("in_slices must be >= 4 for the 3D variant")


def resnet10_config(**overrides) -> EncoderConfig:
    """Four-stage config whose weighted-layer count is ten (stem + 4x2 convs + head)."""
    base = EncoderConfig(in_rows=48, in_cols=48, channels=(64, 128, 256, 512),
                         num_blocks=1, embedding_dim=128)
    return replace(base, **overrides)


def _layer_plan(cfg: EncoderConfig, dim: int, out_dim: int):
    """Flat list of weighted layers: ('conv', name, cin, cout, k, stride) / ('linear', ...)."""
    plan = []
    plan.append(("conv", "stem.conv", 1, cfg.channels[0], 3, cfg.stem_stride))
    prev = cfg.channels[0]
    for i, width in enumerate(cfg.channels):
        for j in range(cfg.num_blocks):
            stride = 2 if (i > 0 and j == 0) else 1
            name = f"stage{i}.block{j}"
            plan.append(("conv", f"{name}.conv1", prev, width, 3, stride))
            plan.append(("conv", f"{name}.conv2", width, width, 3, 1))
            if stride != 1 or prev != width:
                plan.append(("conv", f"{name}.proj", prev, width, 1, stride))
            prev = width
    plan.append(("linear", "head", prev, out_dim, None, None))
    return plan


def count_parameters(cfg: EncoderConfig, dim: int = 2, out_dim: int | None = None) -> int:
    """Analytic parameter count: conv kernels + norm scale/shift + linear head."""
    if out_dim is None:
        out_dim = cfg.embedding_dim if dim == 2 else 1
    total = 0
    for kind, _name, cin, cout, k, _s in _layer_plan(cfg, dim, out_dim):
        if kind == "conv":
            total += (k ** dim) * cin * cout   # no conv bias; norm follows
            total += 2 * cout                  # gamma, beta
        else:
            total += cin * cout + cout
    return total


class Encoder:
    """Parameter container plus forward/backward for one residual encoder.

    ``params`` maps hierarchical names to arrays and is shared by the
    optimizer and the checkpoint writer.  ``buffers`` holds batch-norm
    running statistics (absent in group-norm mode).
    """

    def __init__(self, config: EncoderConfig, dim: int = 2, dtype=np.float32):
        config.validate()
        if dim not in (2, 3):
            raise ConfigurationError("dim must be 2 or 3")
        self.config = config
        self.dim = dim
        self.out_dim = config.embedding_dim if dim == 2 else 1
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._plan = _layer_plan(config, dim, self.out_dim)
        self._init_params()

    # -- construction ---------------------------------------------------------

    def _init_params(self) -> None:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.config.seed)))
        dt = self.dtype
        for kind, name, cin, cout, k, _s in self._plan:
            if kind == "conv":
                shape = (k,) * self.dim + (cin, cout)
                fan_in = cin * k ** self.dim
                self.params[f"{name}.w"] = nn.he_normal(rng, shape, fan_in, dt)
                nname = _norm_name(name)  # paired normalisation layer
                self.params[f"{nname}.gamma"] = np.ones(cout, dtype=dt)
                self.params[f"{nname}.beta"] = np.zeros(cout, dtype=dt)
                if self.config.norm_kind == "batch":
                    self.buffers[f"{nname}.running_mean"] = np.zeros(cout, dtype=dt)
                    self.buffers[f"{nname}.running_var"] = np.ones(cout, dtype=dt)
            else:
                self.params["head.w"] = nn.he_normal(rng, (cout, cin), cin, dt)
                self.params["head.b"] = np.zeros(cout, dtype=dt)

    def descriptor(self) -> dict:
        d = asdict(self.config)
        d["channels"] = list(self.config.channels)
        d.update(family=DESCRIPTOR_FAMILY, dim=self.dim, out_dim=self.out_dim)
        return d

    def conv_layers(self):
        """Weighted-layer plan for the FLOP cost model."""
        return list(self._plan)

    def num_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    # -- forward / backward -----------------------------------------------------

    def _norm_forward(self, nname, x, training):
        g = self.params[f"{nname}.gamma"]
        b = self.params[f"{nname}.beta"]
        if self.config.norm_kind == "group":
            groups = min(self.config.num_groups, x.shape[1])
            return nn.group_norm_forward(x, g, b, groups)
        return nn.batch_norm_forward(
            x, g, b,
            self.buffers[f"{nname}.running_mean"], self.buffers[f"{nname}.running_var"],
            training)

    def _norm_backward(self, nname, cache, dout, grads):
        g = self.params[f"{nname}.gamma"]
        if self.config.norm_kind == "group":
            dx, dg, db = nn.group_norm_backward(cache, g, dout)
        else:
            dx, dg, db = nn.batch_norm_backward(cache, g, dout)
        grads[f"{nname}.gamma"] = dg
        grads[f"{nname}.beta"] = db
        return dx

    def forward(self, x: np.ndarray, training: bool = False):
        """x: [B, r, c] (2D) or [B, R, C, S] (3D) -> ([B, out_dim], caches)."""
        cfg = self.config
        if self.dim == 2:
            expect = (cfg.in_rows, cfg.in_cols)
        else:
            expect = (cfg.in_rows, cfg.in_cols) + ((cfg.in_slices,) if cfg.in_slices else ())
        if x.ndim != self.dim + 1 or x.shape[1:1 + len(expect)] != expect:
            raise ContractViolationError(
                f"encoder expects input [B, {', '.join(map(str, expect))}], got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractViolationError("encoder input contains non-finite values")

        conv_f = nn.conv2d_forward if self.dim == 2 else nn.conv3d_forward
        x = np.ascontiguousarray(x[..., None], dtype=self.dtype)  # channels-last
        caches = {}

        def conv_norm(name, inp, stride):
            out, ccache = conv_f(inp, self.params[f"{name}.w"], stride=stride)
            nname = _norm_name(name)
            out, ncache = self._norm_forward(nname, out, training)
            caches[name] = (ccache, ncache)
            return out

        h = conv_norm("stem.conv", x, cfg.stem_stride)
        h, caches["stem.relu"] = nn.relu_forward(h)

        prev = cfg.channels[0]
        for i, width in enumerate(cfg.channels):
            for j in range(cfg.num_blocks):
                stride = 2 if (i > 0 and j == 0) else 1
                name = f"stage{i}.block{j}"
                identity = h
                out = conv_norm(f"{name}.conv1", h, stride)
                out, caches[f"{name}.relu1"] = nn.relu_forward(out)
                out = conv_norm(f"{name}.conv2", out, 1)
                if stride != 1 or prev != width:
                    identity = conv_norm(f"{name}.proj", h, stride)
                h, caches[f"{name}.relu2"] = nn.relu_forward(out + identity)
                prev = width

        pooled, caches["gap"] = nn.global_avg_pool_forward(h)
        out, caches["head"] = nn.linear_forward(pooled, self.params["head.w"], self.params["head.b"])
        return out, caches

    def backward(self, caches, dout: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar objective w.r.t. every parameter, given d(objective)/d(output)."""
        cfg = self.config
        conv_b = nn.conv2d_backward if self.dim == 2 else nn.conv3d_backward
        grads: dict[str, np.ndarray] = {}

        def conv_norm_back(name, dy, need_dx=True):
            ccache, ncache = caches[name]
            nname = _norm_name(name)
            dy = self._norm_backward(nname, ncache, dy, grads)
            dx, dw = conv_b(ccache, self.params[f"{name}.w"], dy, need_dx=need_dx)
            grads[f"{name}.w"] = dw
            return dx

        dpooled, grads["head.w"], grads["head.b"] = nn.linear_backward(
            caches["head"], self.params["head.w"], dout)
        dh = nn.global_avg_pool_backward(caches["gap"], dpooled)

        prev_widths = _incoming_widths(cfg)
        for i in reversed(range(len(cfg.channels))):
            width = cfg.channels[i]
            for j in reversed(range(cfg.num_blocks)):
                stride = 2 if (i > 0 and j == 0) else 1
                name = f"stage{i}.block{j}"
                prev = prev_widths[(i, j)]
                dsum = nn.relu_backward(caches[f"{name}.relu2"], dh)
                if stride != 1 or prev != width:
                    dident = conv_norm_back(f"{name}.proj", dsum)
                else:
                    dident = dsum
                dmain = conv_norm_back(f"{name}.conv2", dsum)
                dmain = nn.relu_backward(caches[f"{name}.relu1"], dmain)
                dh = conv_norm_back(f"{name}.conv1", dmain) + dident

        dh = nn.relu_backward(caches["stem.relu"], dh)
        conv_norm_back("stem.conv", dh, need_dx=False)  # input gradient unused
        return grads

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode forward (running stats in batch-norm mode)."""
        out, _ = self.forward(x, training=False)
        return out


def _norm_name(conv_name: str) -> str:
    # stem.conv -> stem.norm; stageI.blockJ.convK -> stageI.blockJ.normK; .proj -> .proj_norm
    if conv_name == "stem.conv":
        return "stem.norm"
    if conv_name.endswith(".proj"):
        return conv_name[:-5] + ".proj_norm"
    head, tail = conv_name.rsplit(".", 1)
    return f"{head}.{tail.replace('conv', 'norm')}"


def _incoming_widths(cfg: EncoderConfig) -> dict:
    widths = {}
    prev = cfg.channels[0]
    for i, width in enumerate(cfg.channels):
        for j in range(cfg.num_blocks):
            widths[(i, j)] = prev
            prev = width
    return widths


def build_encoder(config: EncoderConfig, dtype=np.float32) -> Encoder:
    """2D patch encoder producing embedding_dim features."""
    return Encoder(config, dim=2, dtype=dtype)


def build_encoder_3d(config: EncoderConfig, dtype=np.float32) -> Encoder:
    """3D volume encoder producing a single classification logit."""
    return Encoder(config, dim=3, dtype=dtype)


def encode_batch(patches: np.ndarray, encoder: Encoder) -> np.ndarray:
    """Embed B patches; row i is the embedding of patch i."""
    arr = np.asarray(patches, dtype=encoder.dtype)
    if arr.ndim == 2:
        arr = arr[None]
    return encoder.encode(arr)
