"""Datasets: CIFAR-100 binary ingestion, synthetic generation, batching.

Binary record layout (shared by CIFAR-100 and persisted synthetic sets):
one record is ``2 + 3*H*W`` bytes; byte 0 is the coarse label, byte 1 the
fine label, then the RGB pixel planes row-major. CIFAR-100 files use
H = W = 32, i.e. 3074 bytes per record. Loading is bit-exact: serializing
the loaded records reproduces the input file byte for byte.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    CorruptRecordError,
    DuplicateFineError,
    EmptyDatasetError,
    InvalidShapeError,
    LabelOutOfRangeError,
    MissingFileError,
    NonSurjectiveError,
    SparseIdsError,
)
from .taxonomy import LabelPair, Taxonomy, load_taxonomy, save_taxonomy

__all__ = [
    "ImageRecord",
    "ImageDataset",
    "Batch",
    "AugmentPolicy",
    "load_cifar100",
    "serialize_records",
    "parse_records",
    "save_dataset_dir",
    "load_dataset_dir",
    "generate_synthetic_dataset",
    "augment",
    "batch_iter",
    "take_fine_subset",
]

CIFAR_TRAIN_FILE = "train.bin"
CIFAR_TEST_FILE = "test.bin"
CIFAR_FINE_NAMES = "fine_label_names.txt"
CIFAR_COARSE_NAMES = "coarse_label_names.txt"
SYNTH_TAXONOMY_FILE = "taxonomy.tsv"
SYNTH_META_FILE = "meta.json"

# normalization applied after augmentation: (byte/255 - MEAN) / STD per channel
NORM_MEAN = 0.5
NORM_STD = 0.5


@dataclass(frozen=True)
class ImageRecord:
    """One image: channel-major uint8 pixels plus its fine/coarse labels."""

    pixels: np.ndarray  # (3, H, W) uint8
    labels: LabelPair


class ImageDataset:
    """Immutable-by-convention record collection backed by contiguous arrays."""

    def __init__(self, pixels: np.ndarray, fine: np.ndarray, coarse: np.ndarray):
        if pixels.ndim != 4 or pixels.shape[1] != 3:
            raise InvalidShapeError(f"pixels must be (N, 3, H, W), got {pixels.shape}")
        if not (len(pixels) == len(fine) == len(coarse)):
            raise InvalidShapeError("pixels and label arrays disagree on record count")
        self.pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        self.fine = np.asarray(fine, dtype=np.int64)
        self.coarse = np.asarray(coarse, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i: int) -> ImageRecord:
        return ImageRecord(
            pixels=self.pixels[i],
            labels=LabelPair(fine=int(self.fine[i]), coarse=int(self.coarse[i])),
        )

    @property
    def image_size(self) -> int:
        return int(self.pixels.shape[2])


@dataclass(frozen=True)
class Batch:
    """Normalized float32 inputs with aligned fine/coarse label vectors."""

    inputs: np.ndarray  # (B, 3, H, W) float32
    fine_labels: np.ndarray  # (B,) int64
    coarse_labels: np.ndarray  # (B,) int64


@dataclass(frozen=True)
class AugmentPolicy:
    """Geometric augmentation knobs; ``eval()`` is normalize-only.

    force_center pins the crop to the padded center and suppresses the
    random draws, which makes the train policy deterministic for tests.
    """

    kind: str  # "train" | "eval"
    pad: int = 4
    crop: int = 32
    flip_prob: float = 0.5
    force_center: bool = False

    @staticmethod
    def train(crop: int = 32, pad: int = 4, flip_prob: float = 0.5,
              force_center: bool = False) -> "AugmentPolicy":
        return AugmentPolicy("train", pad=pad, crop=crop, flip_prob=flip_prob,
                             force_center=force_center)

    @staticmethod
    def eval() -> "AugmentPolicy":
        return AugmentPolicy("eval")


def _normalize(pixels: np.ndarray) -> np.ndarray:
    return ((pixels.astype(np.float32) / 255.0) - NORM_MEAN) / NORM_STD


def augment(record: ImageRecord, rng: np.random.Generator | None,
            policy: AugmentPolicy) -> np.ndarray:
    """Apply the policy's geometric transforms, then normalize to float32.

    The eval policy ignores ``rng`` entirely. The train policy draws, in
    order: crop row offset, crop column offset, flip coin.
    """
    px = record.pixels
    if policy.kind == "eval":
        return _normalize(px)
    pad, crop = policy.pad, policy.crop
    padded = np.pad(px, ((0, 0), (pad, pad), (pad, pad)), mode="constant")
    span = padded.shape[1] - crop
    if policy.force_center or rng is None:
        oy = ox = span // 2
        flip = False
    else:
        oy = int(rng.integers(0, span + 1))
        ox = int(rng.integers(0, span + 1))
        flip = bool(rng.random() < policy.flip_prob)
    out = padded[:, oy:oy + crop, ox:ox + crop]
    if flip:
        out = out[:, :, ::-1]
    return _normalize(out)


def batch_iter(dataset: ImageDataset, batch_size: int,
               shuffle_seed: int | None = None, epoch: int = 0,
               policy: AugmentPolicy | None = None):
    """Yield Batches covering the dataset exactly once.

    The record permutation is a pure function of (shuffle_seed, epoch) and
    the identity when shuffle_seed is None. Augmentation draws come from a
    stream derived from the same pair, so the whole epoch is reproducible.
    The final batch may be short.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyDatasetError("batch_iter over empty dataset")
    if batch_size < 1:
        raise InvalidShapeError(f"batch_size must be positive, got {batch_size}")
    if policy is None:
        policy = AugmentPolicy.eval()
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        perm_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([shuffle_seed & 0xFFFFFFFFFFFFFFFF, epoch])))
        order = perm_rng.permutation(n)
    aug_rng = None
    if policy.kind == "train":
        aug_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
            [(shuffle_seed or 0) & 0xFFFFFFFFFFFFFFFF, epoch, 0xA6])))
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        inputs = np.stack([augment(dataset[int(i)], aug_rng, policy) for i in idx])
        yield Batch(
            inputs=inputs.astype(np.float32, copy=False),
            fine_labels=dataset.fine[idx],
            coarse_labels=dataset.coarse[idx],
        )


# ---------------------------------------------------------------------------
# binary record layout

def _record_bytes(size: int) -> int:
    return 2 + 3 * size * size


def serialize_records(dataset: ImageDataset) -> bytes:
    """Pack records into the binary layout (coarse byte, fine byte, planes)."""
    if np.any(dataset.fine > 255) or np.any(dataset.coarse > 255):
        raise InvalidShapeError("record layout stores labels as single bytes")
    n = len(dataset)
    size = dataset.image_size
    out = np.empty((n, _record_bytes(size)), dtype=np.uint8)
    out[:, 0] = dataset.coarse.astype(np.uint8)
    out[:, 1] = dataset.fine.astype(np.uint8)
    out[:, 2:] = dataset.pixels.reshape(n, -1)
    return out.tobytes()


def parse_records(raw: bytes, size: int, source: str = "<bytes>"):
    """Split raw bytes into (pixels, fine, coarse) arrays; bit-exact."""
    rec = _record_bytes(size)
    if len(raw) == 0 or len(raw) % rec != 0:
        raise CorruptRecordError(
            f"{source}: length {len(raw)} is not a positive multiple of {rec}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    coarse = arr[:, 0].astype(np.int64)
    fine = arr[:, 1].astype(np.int64)
    pixels = arr[:, 2:].reshape(-1, 3, size, size).copy()
    return pixels, fine, coarse


def _read_names(path) -> tuple[str, ...]:
    with open(path, "r", encoding="utf-8") as fh:
        return tuple(line.strip() for line in fh if line.strip())


def _taxonomy_from_records(fine: np.ndarray, coarse: np.ndarray,
                           fine_names: tuple[str, ...],
                           coarse_names: tuple[str, ...]) -> Taxonomy:
    num_fine, num_coarse = len(fine_names), len(coarse_names)
    if fine.max(initial=0) >= num_fine or coarse.max(initial=0) >= num_coarse:
        raise LabelOutOfRangeError(
            f"label bytes exceed name counts ({num_fine} fine / {num_coarse} coarse)")
    parent = np.full(num_fine, -1, dtype=np.int64)
    for f, c in zip(fine, coarse):
        if parent[f] == -1:
            parent[f] = c
        elif parent[f] != c:
            raise DuplicateFineError(
                f"fine id {f} stored with coarse ids {parent[f]} and {c}")
    if np.any(parent < 0):
        missing = np.nonzero(parent < 0)[0]
        raise SparseIdsError(f"fine ids never observed: {missing[:8].tolist()}")
    observed = set(parent.tolist())
    gaps = [c for c in range(num_coarse) if c not in observed]
    if gaps:
        raise NonSurjectiveError(f"coarse ids {gaps[:8]} have no children")
    return Taxonomy(
        num_fine=num_fine,
        num_coarse=num_coarse,
        parent=tuple(int(p) for p in parent),
        fine_names=fine_names,
        coarse_names=coarse_names,
    )


def load_cifar100(directory):
    """Load a cifar-100-binary directory.

    Expects train.bin, test.bin and the two *_label_names.txt files.
    Returns (train, test, taxonomy); the taxonomy is reconstructed from the
    stored (fine, coarse) byte pairs and checked for consistency.
    """
    paths = {}
    for name in (CIFAR_TRAIN_FILE, CIFAR_TEST_FILE, CIFAR_FINE_NAMES, CIFAR_COARSE_NAMES):
        p = os.path.join(directory, name)
        if not os.path.isfile(p):
            raise MissingFileError(f"missing {name} in {directory}")
        paths[name] = p
    fine_names = _read_names(paths[CIFAR_FINE_NAMES])
    coarse_names = _read_names(paths[CIFAR_COARSE_NAMES])
    splits = []
    for name in (CIFAR_TRAIN_FILE, CIFAR_TEST_FILE):
        with open(paths[name], "rb") as fh:
            raw = fh.read()
        pixels, fine, coarse = parse_records(raw, 32, source=paths[name])
        splits.append(ImageDataset(pixels, fine, coarse))
    train, test = splits
    tax = _taxonomy_from_records(
        np.concatenate([train.fine, test.fine]),
        np.concatenate([train.coarse, test.coarse]),
        fine_names, coarse_names,
    )
    return train, test, tax


def save_dataset_dir(directory, train: ImageDataset, test: ImageDataset,
                     tax: Taxonomy) -> None:
    """Persist a dataset pair in the binary record layout with sidecars."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, CIFAR_TRAIN_FILE), "wb") as fh:
        fh.write(serialize_records(train))
    with open(os.path.join(directory, CIFAR_TEST_FILE), "wb") as fh:
        fh.write(serialize_records(test))
    save_taxonomy(tax, os.path.join(directory, SYNTH_TAXONOMY_FILE))
    meta = {"image_size": train.image_size,
            "num_train": len(train), "num_test": len(test)}
    with open(os.path.join(directory, SYNTH_META_FILE), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_dataset_dir(directory):
    """Load either a synthetic dataset dir (taxonomy.tsv + meta.json) or a
    cifar-100-binary dir. Returns (train, test, taxonomy)."""
    tsv = os.path.join(directory, SYNTH_TAXONOMY_FILE)
    if not os.path.isfile(tsv):
        return load_cifar100(directory)
    tax = load_taxonomy(tsv)
    meta_path = os.path.join(directory, SYNTH_META_FILE)
    if not os.path.isfile(meta_path):
        raise MissingFileError(f"missing {SYNTH_META_FILE} in {directory}")
    with open(meta_path, "r", encoding="utf-8") as fh:
        size = int(json.load(fh)["image_size"])
    splits = []
    for name in (CIFAR_TRAIN_FILE, CIFAR_TEST_FILE):
        p = os.path.join(directory, name)
        if not os.path.isfile(p):
            raise MissingFileError(f"missing {name} in {directory}")
        with open(p, "rb") as fh:
            raw = fh.read()
        pixels, fine, coarse = parse_records(raw, size, source=p)
        if fine.max(initial=0) >= tax.num_fine or coarse.max(initial=0) >= tax.num_coarse:
            raise LabelOutOfRangeError(f"{p}: labels exceed taxonomy counts")
        splits.append(ImageDataset(pixels, fine, coarse))
    return splits[0], splits[1], tax


def take_fine_subset(dataset: ImageDataset, tax: Taxonomy,
                     fine_ids: list[int]) -> tuple[ImageDataset, Taxonomy]:
    """Restrict to the given fine classes, remapping ids densely.

    Coarse ids are remapped in order of first appearance so the result
    stays dense and surjective.
    """
    fine_ids = list(fine_ids)
    if len(set(fine_ids)) != len(fine_ids):
        raise InvalidShapeError("fine_ids contains duplicates")
    for f in fine_ids:
        if not 0 <= f < tax.num_fine:
            raise LabelOutOfRangeError(f"fine id {f} out of range")
    fine_map = {old: new for new, old in enumerate(fine_ids)}
    coarse_map: dict[int, int] = {}
    new_parent = []
    for old in fine_ids:
        c = tax.parent[old]
        coarse_map.setdefault(c, len(coarse_map))
        new_parent.append(coarse_map[c])
    sub_tax = Taxonomy(
        num_fine=len(fine_ids),
        num_coarse=len(coarse_map),
        parent=tuple(new_parent),
        fine_names=tuple(tax.fine_names[f] for f in fine_ids) if tax.fine_names else (),
        coarse_names=tuple(
            name for name, _ in sorted(
                ((tax.coarse_names[c], i) for c, i in coarse_map.items()),
                key=lambda t: t[1])
        ) if tax.coarse_names else (),
    )
    mask = np.isin(dataset.fine, fine_ids)
    fine = np.array([fine_map[int(f)] for f in dataset.fine[mask]], dtype=np.int64)
    coarse = np.array([sub_tax.parent[f] for f in fine], dtype=np.int64)
    return ImageDataset(dataset.pixels[mask], fine, coarse), sub_tax


# ---------------------------------------------------------------------------
# synthetic hierarchical images

# glyph family cycled by the fine index within its coarse class
_GLYPHS = ("square", "ring", "disc", "diamond", "plus", "cross")

# composition weights, tuned so the coarse signal is linearly visible while
# fine classes need the glyph shape
_STRIPE_AMP = 0.20
_GLYPH_AMP = 0.45
_NOISE_STD = 0.15


def _glyph_mask(shape: str, size: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    cheb = np.maximum(ady, adx)
    if shape == "square":
        return cheb <= r
    if shape == "ring":
        return (cheb <= r) & (cheb > r // 2)
    if shape == "disc":
        return dy * dy + dx * dx <= r * r
    if shape == "diamond":
        return ady + adx <= r
    if shape == "plus":
        bar = max(1, r // 3)
        return ((adx <= bar) & (ady <= r)) | ((ady <= bar) & (adx <= r))
    if shape == "cross":
        bar = max(1, r // 3)
        return (np.abs(ady - adx) <= bar) & (cheb <= r)
    raise ValueError(f"unknown glyph {shape}")


def generate_synthetic_dataset(tax: Taxonomy, n_per_fine: int, size: int,
                               seed: int) -> ImageDataset:
    """Deterministic hierarchical image fixture.

    The coarse class fixes a striped background (orientation, frequency,
    phase and channel weighting), the fine class fixes a glyph shape drawn
    at a per-record random position and size, and seeded Gaussian noise is
    added on top. The glyph brightens all channels equally, so fine classes
    within a coarse class differ by shape alone. Output is byte-identical
    for identical arguments.
    """
    if size < 16:
        raise InvalidShapeError(f"size must be >= 16, got {size}")
    if n_per_fine < 1:
        raise InvalidShapeError(f"n_per_fine must be positive, got {n_per_fine}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [seed & 0xFFFFFFFFFFFFFFFF, tax.num_fine, tax.num_coarse, size])))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    # backgrounds must survive the training augmentation: orientation is
    # restricted to horizontal/vertical (flip-invariant) and the class is
    # carried by (orientation, frequency), which random crops preserve
    backgrounds = []
    for c in range(tax.num_coarse):
        axis = xx if c % 2 == 0 else yy
        freq = 2 + c // 2
        phase = 0.9 * c
        stripe = np.sin(2 * math.pi * freq * axis + phase)
        weights = np.roll(np.array([1.0, 0.6, 0.3]), c % 3)
        backgrounds.append(stripe[None, :, :] * weights[:, None, None])

    n_total = tax.num_fine * n_per_fine
    pixels = np.empty((n_total, 3, size, size), dtype=np.uint8)
    fine = np.empty(n_total, dtype=np.int64)
    coarse = np.empty(n_total, dtype=np.int64)
    r_base = max(3, size // 6)
    i = 0
    for f in range(tax.num_fine):
        c = tax.parent[f]
        k = f - min(tax.children(c))  # index within the coarse block
        shape = _GLYPHS[k % len(_GLYPHS)]
        for _ in range(n_per_fine):
            img = 0.5 + _STRIPE_AMP * backgrounds[c].copy()
            r = r_base + int(rng.integers(-1, 2))
            cy = int(rng.integers(r + 1, size - r - 1))
            cx = int(rng.integers(r + 1, size - r - 1))
            mask = _glyph_mask(shape, size, cy, cx, r)
            img[:, mask] += _GLYPH_AMP
            img += rng.normal(0.0, _NOISE_STD, size=img.shape)
            np.clip(img, 0.0, 1.0, out=img)
            pixels[i] = np.round(img * 255.0).astype(np.uint8)
            fine[i] = f
            coarse[i] = c
            i += 1
    return ImageDataset(pixels, fine, coarse)
