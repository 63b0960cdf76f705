"""Synthetic volumes, container I/O, manifests, and bag/sub-bag sampling.

The private clinical scans this problem was posed on are replaced by a
phantom generator: each volume is an ellipsoidal bright shell ("atrium
wall") with textured intensity over a noisy background, and a boolean
region-of-interest mask standing in for a segmentation.  Non-diagnostic
volumes get slice-local corruption (blur, ghosting, intensity dropout, or
strong noise) on a sparse subset of mask slices, which gives the dataset the
same weakly-supervised shape as the real problem: the label is a property of
a few slices the model must find.

File formats (documented in the README):

``<id>.volhdr``
    line-oriented ``key: value`` text; keys format_version, id, dims,
    dtype, score, label, mask_present, provenance, artifact_record,
    payload_sha256.
``<id>.volraw``
    little-endian float32 voxels, C-order (rows, cols, slices), followed by
    the mask as one byte per voxel when mask_present is 1.
``manifest.txt``
    header lines (format_version, seed, ratios, columns) followed by one
    whitespace-separated entry per volume: id path score label split.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (ChecksumMismatchError, ConfigurationError, InvalidInputError,
                     NotFoundError, PayloadMismatchError, PayloadTruncatedError,
                     SamplingError, VolumeHeaderError)

VOLUME_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1

ARTIFACT_KINDS = ("blur", "ghosting", "dropout", "noise")

SPLIT_NAMES = ("train", "val", "test")


# --- core containers --------------------------------------------------------------

@dataclass
class Volume:
    """One scan: a 3D scalar field plus quality metadata.

    ``voxels`` and ``mask`` are (rows, cols, slices); the mask marks the
    region of interest and always intersects at least one slice.  ``label``
    is derived from ``score`` by the >= 3 rule.
    """
    voxels: np.ndarray
    mask: np.ndarray
    score: int
    label: int
    id: str
    provenance: str = "synthetic"
    artifact_record: list[tuple[int, str]] = field(default_factory=list)

    def validate(self) -> None:
        if self.voxels.ndim != 3 or self.mask.shape != self.voxels.shape:
            raise InvalidInputError(
                f"volume {self.id}: voxels {self.voxels.shape} vs mask {self.mask.shape}")
        if not self.mask.any():
            raise InvalidInputError(f"volume {self.id}: empty mask")
        if binarize_score(self.score) != self.label:
            raise InvalidInputError(
                f"volume {self.id}: label {self.label} inconsistent with score {self.score}")


@dataclass
class ManifestEntry:
    id: str
    path: str              # header path, relative to the manifest directory
    score: int
    label: int
    split: str | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    seed: int
    ratios: tuple[float, float, float] | None = None
    root: Path | None = None

    def ids(self, split: str | None = None) -> list[str]:
        return [e.id for e in self.entries if split is None or e.split == split]

    def entry(self, volume_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == volume_id:
                return e
        raise NotFoundError(f"volume id {volume_id!r} not in manifest")

    def volume_path(self, volume_id: str) -> Path:
        if self.root is None:
            raise InvalidInputError("manifest has no root directory")
        return self.root / self.entry(volume_id).path


@dataclass
class Patch:
    """A single 2D crop and where it came from in its parent volume."""
    pixels: np.ndarray
    slice_index: int
    row_offset: int
    col_offset: int


@dataclass
class SubBagBatch:
    """M sub-bags of K patches sampled from one volume.

    ``patches`` is [M, K, r, c]; ``origins`` is [M, K, 2] (row, col offsets)
    and ``slice_indices`` is [M], retained so attention can be projected back
    onto slices.
    """
    patches: np.ndarray
    slice_indices: np.ndarray
    origins: np.ndarray
    volume_id: str
    label: int
    in_plane_shape: tuple[int, int]

    def patch(self, m: int, k: int) -> Patch:
        return Patch(pixels=self.patches[m, k],
                     slice_index=int(self.slice_indices[m]),
                     row_offset=int(self.origins[m, k, 0]),
                     col_offset=int(self.origins[m, k, 1]))


# --- label rule --------------------------------------------------------------------

def binarize_score(score: int) -> int:
    """Quality scores of 3..5 are diagnostic (1); 1..2 are not (0)."""
    s = int(score)
    if s != score or not 1 <= s <= 5:
        raise InvalidInputError(f"score must be an integer in 1..5, got {score!r}")
    return 1 if s >= 3 else 0


# --- volume container I/O ------------------------------------------------------------

def _header_path(path) -> Path:
    p = Path(path)
    return p if p.suffix == ".volhdr" else p.with_suffix(".volhdr")


def save_volume(volume: Volume, path) -> Path:
    """Write ``<id>.volhdr`` + ``<id>.volraw``; returns the header path."""
    volume.validate()
    hdr_path = _header_path(path)
    raw_path = hdr_path.with_suffix(".volraw")
    voxels = np.ascontiguousarray(volume.voxels, dtype="<f4")
    payload = voxels.tobytes() + np.ascontiguousarray(volume.mask, dtype=np.uint8).tobytes()
    digest = hashlib.sha256(payload).hexdigest()
    record = " ".join(f"{s}:{kind}" for s, kind in volume.artifact_record)
    lines = [
        f"format_version: {VOLUME_FORMAT_VERSION}",
        f"id: {volume.id}",
        "dims: {} {} {}".format(*volume.voxels.shape),
        "dtype: float32-le",
        f"score: {volume.score}",
        f"label: {volume.label}",
        "mask_present: 1",
        f"provenance: {volume.provenance}",
        f"artifact_record: {record if record else '-'}",
        f"payload_sha256: {digest}",
    ]
    raw_path.write_bytes(payload)
    hdr_path.write_text("\n".join(lines) + "\n")
    return hdr_path


def _parse_kv_text(text: str, what: str, error_cls) -> dict[str, str]:
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise error_cls(f"{what}: malformed line {lineno}: {line!r}")
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    return fields


def load_volume(path) -> Volume:
    """Read a volume pair back; raises distinct errors for distinct damage."""
    hdr_path = _header_path(path)
    if not hdr_path.exists():
        raise NotFoundError(f"no such volume header: {hdr_path}")
    fields = _parse_kv_text(hdr_path.read_text(), f"header {hdr_path}", VolumeHeaderError)
    required = ("format_version", "dims", "dtype", "score", "label",
                "mask_present", "payload_sha256")
    missing = [k for k in required if k not in fields]
    if missing:
        raise VolumeHeaderError(f"header {hdr_path}: missing keys {missing}")
    if fields["format_version"] != str(VOLUME_FORMAT_VERSION):
        raise VolumeHeaderError(
            f"header {hdr_path}: unsupported format_version {fields['format_version']}")
    if fields["dtype"] != "float32-le":
        raise VolumeHeaderError(f"header {hdr_path}: unsupported dtype {fields['dtype']}")
    try:
        dims = tuple(int(t) for t in fields["dims"].split())
        score = int(fields["score"])
        label = int(fields["label"])
        mask_present = int(fields["mask_present"])
    except ValueError as exc:
        raise VolumeHeaderError(f"header {hdr_path}: {exc}") from exc
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise VolumeHeaderError(f"header {hdr_path}: bad dims {fields['dims']!r}")

    n = int(np.prod(dims))
    expected = n * 4 + (n if mask_present else 0)
    raw_path = hdr_path.with_suffix(".volraw")
    if not raw_path.exists():
        raise NotFoundError(f"no such payload: {raw_path}")
    payload = raw_path.read_bytes()
    if len(payload) < expected:
        raise PayloadTruncatedError(
            f"{raw_path}: payload is {len(payload)} bytes, header promises {expected}")
    if len(payload) > expected:
        raise PayloadMismatchError(
            f"{raw_path}: payload is {len(payload)} bytes, header promises {expected}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != fields["payload_sha256"]:
        raise ChecksumMismatchError(f"{raw_path}: payload sha256 does not match header")

    voxels = np.frombuffer(payload[:n * 4], dtype="<f4").reshape(dims).copy()
    if mask_present:
        mask = np.frombuffer(payload[n * 4:], dtype=np.uint8).reshape(dims).astype(bool)
    else:
        mask = np.ones(dims, dtype=bool)
    record = []
    rec_text = fields.get("artifact_record", "-")
    if rec_text and rec_text != "-":
        for token in rec_text.split():
            s, _, kind = token.partition(":")
            record.append((int(s), kind))
    return Volume(voxels=voxels, mask=mask, score=score, label=label,
                  id=fields.get("id", hdr_path.stem),
                  provenance=fields.get("provenance", "external"),
                  artifact_record=record)


# --- manifest I/O ----------------------------------------------------------------------

def save_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    lines = [f"format_version: {MANIFEST_FORMAT_VERSION}",
             f"seed: {manifest.seed}"]
    if manifest.ratios is not None:
        lines.append("ratios: {} {} {}".format(*manifest.ratios))
    lines.append("columns: id path score label split")
    for e in manifest.entries:
        lines.append(f"{e.id} {e.path} {e.score} {e.label} {e.split or '-'}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no such manifest: {path}")
    header: dict[str, str] = {}
    entries: list[ManifestEntry] = []
    header_keys = ("format_version:", "seed:", "ratios:", "columns:")
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith(header_keys):
            key, _, value = line.partition(":")
            header[key.strip()] = value.strip()
            continue
        parts = line.split()
        if len(parts) != 5:
            raise VolumeHeaderError(f"manifest {path}: malformed entry {line!r}")
        vid, vpath, score, label, split = parts
        entries.append(ManifestEntry(id=vid, path=vpath, score=int(score),
                                     label=int(label),
                                     split=None if split == "-" else split))
    ratios = None
    if "ratios" in header:
        ratios = tuple(float(t) for t in header["ratios"].split())
    return Manifest(entries=entries, seed=int(header.get("seed", 0)),
                    ratios=ratios, root=path.parent)


# --- synthetic generation ------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the phantom generator.

    ``defect_rate`` is the fraction of corruptible mask slices damaged in a
    non-diagnostic volume; ``class_balance`` the fraction of diagnostic
    volumes.  The sparse-defect variant of the experiments uses
    ``defect_rate=0.25``.
    """
    n_volumes: int = 200
    dims: tuple[int, int, int] = (64, 64, 24)
    defect_rate: float = 0.5
    artifact_kinds: tuple[str, ...] = ARTIFACT_KINDS
    class_balance: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_volumes < 4:
            raise ConfigurationError("n_volumes must be >= 4")
        if len(self.dims) != 3 or any(d < m for d, m in zip(self.dims, (32, 32, 8))):
            raise ConfigurationError(f"dims must be at least (32, 32, 8), got {self.dims}")
        if not 0.0 <= self.defect_rate <= 1.0:
            raise ConfigurationError("defect_rate must lie in [0, 1]")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ConfigurationError(f"class balance {self.class_balance} unsatisfiable")
        unknown = set(self.artifact_kinds) - set(ARTIFACT_KINDS)
        if unknown or not self.artifact_kinds:
            raise ConfigurationError(f"unknown artifact kinds {sorted(unknown)}")


def volume_rng(master_seed: int, index: int) -> np.random.Generator:
    """Per-volume stream: PCG64 seeded by SeedSequence([master_seed, index])."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, index])))


def _low_freq_field(rng, dims, coarse=(5, 5, 3), amplitude=1.0):
    coarse_noise = rng.standard_normal(coarse)
    zoom = [d / c for d, c in zip(dims, coarse)]
    return amplitude * ndimage.zoom(coarse_noise, zoom, order=1, mode="nearest")


def _apply_artifact(slice2d, kind: str, strength: float, rng) -> None:
    """Corrupt one in-plane slice in place.  strength in (0, 1]."""
    if kind == "blur":
        slice2d[:] = ndimage.gaussian_filter(slice2d, sigma=0.6 + 1.8 * strength)
    elif kind == "ghosting":
        shift = int(rng.integers(5, 12))
        axis = int(rng.integers(0, 2))
        slice2d += (0.45 + 0.45 * strength) * np.roll(slice2d, shift, axis=axis)
    elif kind == "dropout":
        r, c = slice2d.shape
        rr = np.arange(r)[:, None] - rng.uniform(0.3, 0.7) * r
        cc = np.arange(c)[None, :] - rng.uniform(0.3, 0.7) * c
        radius = (0.2 + 0.25 * strength) * min(r, c)
        region = rr * rr + cc * cc < radius * radius
        slice2d[region] *= (1.0 - 0.95 * strength)
    elif kind == "noise":
        slice2d += rng.normal(0.0, 0.35 + 0.8 * strength, slice2d.shape)
    else:
        raise ConfigurationError(f"unknown artifact kind {kind!r}")


def _make_phantom(rng, dims):
    """Ellipsoidal bright shell with texture on a noisy background; returns
    (voxels float32, mask bool)."""
    R, C, S = dims
    center = np.array([R / 2, C / 2, S / 2]) + rng.uniform([-3, -3, -1.5], [3, 3, 1.5])
    semi = np.array([rng.uniform(0.22, 0.30) * R,
                     rng.uniform(0.22, 0.30) * C,
                     rng.uniform(0.30, 0.40) * S])
    rr = (np.arange(R)[:, None, None] - center[0]) / semi[0]
    cc = (np.arange(C)[None, :, None] - center[1]) / semi[1]
    ss = (np.arange(S)[None, None, :] - center[2]) / semi[2]
    rho = np.sqrt(rr * rr + cc * cc + ss * ss)

    vox = _low_freq_field(rng, dims, amplitude=0.25) + rng.normal(0.0, 0.12, dims)
    interior = rho < 0.86
    wall = np.abs(rho - 1.0) <= 0.14
    vox[interior] += 0.7
    texture = ndimage.gaussian_filter(rng.normal(0.0, 0.4, dims), sigma=(0.8, 0.8, 0.4))
    vox[wall] += 1.8 + texture[wall]
    mask = rho <= 1.12
    return vox.astype(np.float32), mask


def _corruptible_slices(mask: np.ndarray) -> np.ndarray:
    """Mask slices with enough in-plane area that patches can observe damage.

    The 0.25-of-max-area bar keeps this set close to the set of slices the
    sub-bag sampler can actually draw from, so defects are not diluted onto
    unobservable slices.
    """
    areas = mask.sum(axis=(0, 1))
    if areas.max() == 0:
        raise InvalidInputError("mask is empty")
    return np.flatnonzero(areas >= 0.25 * areas.max())


def generate_volume(cfg: SynthConfig, index: int, corrupt: bool) -> Volume:
    """One deterministic phantom; the stream depends only on (seed, index)."""
    rng = volume_rng(cfg.seed, index)
    vox, mask = _make_phantom(rng, cfg.dims)
    slices = _corruptible_slices(mask)
    record: list[tuple[int, str]] = []

    severity = float(rng.uniform(0.5, 1.0))
    clean_q = float(rng.uniform(0.0, 1.0))

    n_bad = round(cfg.defect_rate * len(slices)) if corrupt else 0
    if n_bad > 0:
        n_bad = max(1, min(n_bad, len(slices)))
        chosen = rng.choice(slices, size=n_bad, replace=False)
        for s in sorted(int(s) for s in chosen):
            kind = str(rng.choice(cfg.artifact_kinds))
            _apply_artifact(vox[:, :, s], kind, severity, rng)
            record.append((s, kind))
        score = 1 if severity >= 0.75 else 2
    else:
        # diagnostic: scores 3..5 by residual quality; the weakest third gets
        # one sub-threshold artifact so the >=3 boundary is exercised
        score = 3 + int(clean_q * 3.0)
        if score == 3:
            s = int(rng.choice(slices))
            kind = str(rng.choice(cfg.artifact_kinds))
            _apply_artifact(vox[:, :, s], kind, 0.08 * severity, rng)
            record.append((s, kind))
    return Volume(voxels=vox, mask=mask, score=score, label=binarize_score(score),
                  id=f"vol{index:04d}", provenance="synthetic", artifact_record=record)


def generate_synthetic_dataset(cfg: SynthConfig, out_dir, workers: int = 1) -> Manifest:
    """Write ``n_volumes`` phantom volumes plus an (unsplit) manifest.

    Labels come from the actual corruption applied: with ``defect_rate=0``
    even planned-corrupt volumes stay clean and everything is diagnostic.
    Fully deterministic in ``cfg.seed``; per-volume streams are independent,
    so generation parallelises safely across volumes.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_pos = round(cfg.n_volumes * cfg.class_balance)
    plan = [(i, i >= n_pos) for i in range(cfg.n_volumes)]

    def make(item):
        index, corrupt = item
        vol = generate_volume(cfg, index, corrupt)
        save_volume(vol, out_dir / vol.id)
        return ManifestEntry(id=vol.id, path=f"{vol.id}.volhdr",
                             score=vol.score, label=vol.label)

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(make, plan))
    else:
        entries = [make(item) for item in plan]

    manifest = Manifest(entries=entries, seed=cfg.seed, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.txt")
    return manifest


# --- splitting ------------------------------------------------------------------------------

DEFAULT_RATIOS = (0.64, 0.16, 0.20)   # nested 80:20 of 80:20


def split_dataset(manifest: Manifest, ratios=DEFAULT_RATIOS, seed: int = 0) -> Manifest:
    """Assign stratified train/val/test splits; deterministic in ``seed``."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigurationError(f"ratios must be 3 non-negative fractions summing to 1, got {ratios}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 202])))
    n_active = sum(1 for r in ratios if r > 0)

    by_label: dict[int, list[int]] = {}
    for idx, e in enumerate(manifest.entries):
        by_label.setdefault(e.label, []).append(idx)

    assignment: dict[int, str] = {}
    for label in sorted(by_label):
        indices = by_label[label]
        if len(indices) < n_active:
            raise ConfigurationError(
                f"label {label} has {len(indices)} volumes, fewer than {n_active} splits")
        order = rng.permutation(len(indices))
        counts = _largest_remainder(len(indices), ratios)
        start = 0
        for split, count in zip(SPLIT_NAMES, counts):
            for pos in order[start:start + count]:
                assignment[indices[pos]] = split
            start += count

    entries = [replace(e, split=assignment[i]) for i, e in enumerate(manifest.entries)]
    out = Manifest(entries=entries, seed=seed, ratios=ratios, root=manifest.root)
    if out.root is not None:
        save_manifest(out, out.root / "manifest.txt")
    return out


def _largest_remainder(n: int, ratios) -> list[int]:
    raw = [n * r for r in ratios]
    counts = [int(np.floor(x)) for x in raw]
    rem = n - sum(counts)
    order = np.argsort([c - x for c, x in zip(counts, raw)])  # most-negative first
    for i in range(rem):
        counts[order[i]] += 1
    return counts


# --- normalisation ----------------------------------------------------------------------------

def normalize_volume(volume: Volume) -> Volume:
    """Z-score the voxels using mean/std over the masked region."""
    vals = volume.voxels[volume.mask].astype(np.float64)
    std = vals.std()
    if std < 1e-12:
        raise InvalidInputError(f"volume {volume.id}: constant over mask, cannot normalize")
    out = (volume.voxels.astype(np.float64) - vals.mean()) / std
    return replace(volume, voxels=out.astype(volume.voxels.dtype))


# --- sampling ------------------------------------------------------------------------------------

def _valid_crop_positions(mask2d: np.ndarray, r: int, c: int, min_overlap: float):
    """Top-left offsets of r x c windows overlapping the mask by >= min_overlap of
    their area, via a summed-area table."""
    R, C = mask2d.shape
    if r > R or c > C:
        return np.empty((0, 2), dtype=int)
    sat = np.zeros((R + 1, C + 1), dtype=np.int64)
    sat[1:, 1:] = mask2d.cumsum(axis=0).cumsum(axis=1)
    # window (i, j) covers rows i:i+r, cols j:j+c
    counts = (sat[r:, c:] - sat[:R - r + 1, c:]
              - sat[r:, :C - c + 1] + sat[:R - r + 1, :C - c + 1])
    rows, cols = np.nonzero(counts >= min_overlap * r * c)
    return np.stack([rows, cols], axis=1)


def eligible_slices(volume: Volume, r: int, c: int,
                    min_overlap: float = 0.25) -> dict[int, np.ndarray]:
    """Mask-intersecting slices that admit at least one valid r x c crop,
    mapped to their valid top-left positions."""
    out = {}
    areas = volume.mask.sum(axis=(0, 1))
    threshold = int(np.ceil(min_overlap * r * c))
    for s in np.flatnonzero(areas >= threshold):
        positions = _valid_crop_positions(volume.mask[:, :, int(s)], r, c, min_overlap)
        if len(positions):
            out[int(s)] = positions
    return out


def sample_subbags(volume: Volume, M: int, K: int, r: int, c: int,
                   rng: np.random.Generator, min_overlap: float = 0.25,
                   slice_table: dict[int, np.ndarray] | None = None) -> SubBagBatch:
    """Draw M distinct slices uniformly, then K crops per slice uniformly over
    positions whose window overlaps the mask by >= ``min_overlap``.

    ``slice_table`` lets callers reuse ``eligible_slices`` output across
    epochs (the mask never changes).
    """
    if M < 1 or K < 1:
        raise ConfigurationError("M and K must be >= 1")
    table = slice_table if slice_table is not None else eligible_slices(volume, r, c, min_overlap)
    if len(table) < M:
        raise SamplingError(
            f"volume {volume.id}: only {len(table)} slices admit {r}x{c} crops, need M={M}",
            volume_id=volume.id)
    slice_ids = sorted(table)
    chosen = rng.choice(len(slice_ids), size=M, replace=False)

    patches = np.empty((M, K, r, c), dtype=volume.voxels.dtype)
    origins = np.empty((M, K, 2), dtype=int)
    slice_indices = np.empty(M, dtype=int)
    for m, pos in enumerate(chosen):
        s = slice_ids[int(pos)]
        slice_indices[m] = s
        positions = table[s]
        picks = rng.integers(0, len(positions), size=K)
        plane = volume.voxels[:, :, s]
        for k, p in enumerate(picks):
            i, j = positions[int(p)]
            patches[m, k] = plane[i:i + r, j:j + c]
            origins[m, k] = (i, j)
    return SubBagBatch(patches=patches, slice_indices=slice_indices, origins=origins,
                       volume_id=volume.id, label=volume.label,
                       in_plane_shape=volume.voxels.shape[:2])


# --- subvolume crop --------------------------------------------------------------------------------

def crop_subvolume(volume: Volume, margin: int = 30) -> np.ndarray:
    """Tight mask bounding box, expanded in-plane by ``margin`` (rows and cols
    only) and clipped to the volume; the slice extent stays tight."""
    if not volume.mask.any():
        raise InvalidInputError(f"volume {volume.id}: empty mask")
    rows = np.flatnonzero(volume.mask.any(axis=(1, 2)))
    cols = np.flatnonzero(volume.mask.any(axis=(0, 2)))
    slcs = np.flatnonzero(volume.mask.any(axis=(0, 1)))
    r0 = max(0, rows[0] - margin)
    r1 = min(volume.voxels.shape[0], rows[-1] + 1 + margin)
    c0 = max(0, cols[0] - margin)
    c1 = min(volume.voxels.shape[1], cols[-1] + 1 + margin)
    return volume.voxels[r0:r1, c0:c1, slcs[0]:slcs[-1] + 1].copy()


def crop_subvolume_with_mask(volume: Volume, margin: int = 30):
    """As crop_subvolume, returning the cropped mask alongside the voxels."""
    rows = np.flatnonzero(volume.mask.any(axis=(1, 2)))
    cols = np.flatnonzero(volume.mask.any(axis=(0, 2)))
    slcs = np.flatnonzero(volume.mask.any(axis=(0, 1)))
    r0 = max(0, rows[0] - margin)
    r1 = min(volume.voxels.shape[0], rows[-1] + 1 + margin)
    c0 = max(0, cols[0] - margin)
    c1 = min(volume.voxels.shape[1], cols[-1] + 1 + margin)
    sl = (slice(r0, r1), slice(c0, c1), slice(slcs[0], slcs[-1] + 1))
    return volume.voxels[sl].copy(), volume.mask[sl].copy()


# --- separability oracle -------------------------------------------------------------------------------

def slice_hf_energy(volume: Volume) -> np.ndarray:
    """Mean squared in-plane Laplacian over the mask, per mask-intersecting slice."""
    out = []
    for s in np.flatnonzero(volume.mask.any(axis=(0, 1))):
        plane = volume.voxels[:, :, int(s)].astype(np.float64)
        lap = ndimage.laplace(plane)
        m = volume.mask[:, :, int(s)]
        out.append(float((lap[m] ** 2).mean()))
    return np.asarray(out)


def hf_anomaly_score(volume: Volume) -> float:
    """Trivial quality oracle: dispersion of log slice high-frequency energy.

    Corrupted slices push their energy away from the volume's median in
    either direction (blur down, noise/ghosting up), so clean volumes score
    near zero and damaged ones high.  Used to certify the synthetic dataset
    is separable before any model sees it.
    """
    e = np.log(slice_hf_energy(volume) + 1e-12)
    return float(np.abs(e - np.median(e)).mean())
