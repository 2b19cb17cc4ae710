"""Corpus catalog, stratified splits, and the rotation/mixup augmentations.

A corpus on disk is one subdirectory per class under a root, each holding
image files (PNG/JPEG/BMP). ``scan_dataset`` turns that layout into an
immutable :class:`DatasetIndex`; everything downstream (splits, augmentation,
batch assembly) operates on the index and is deterministic given its seeds.

Rotated samples are virtual: ``augment_rotations`` derives sample ids with a
``#r90`` / ``#r180`` / ``#r270`` suffix and the loader applies the rotation
when the image is materialized, so the 4x expansion costs no disk space.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from PIL import Image

from .errors import InvalidArgumentError, InvalidCorpusError, NotFoundError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}

ROTATION_ANGLES = (90, 180, 270)
_ROTATION_SUFFIXES = {angle: f"#r{angle}" for angle in ROTATION_ANGLES}


class Sample(NamedTuple):
    sample_id: str
    relative_path: str
    class_index: int


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable catalog of labeled image paths.

    ``classes`` is sorted lexicographically and ``class_index`` refers into
    it. ``resolution`` is (height, width, channels); the loader resizes every
    image to it.
    """

    root: Path
    classes: tuple[str, ...]
    samples: tuple[Sample, ...]
    resolution: tuple[int, int, int]

    def __post_init__(self):
        num_classes = len(self.classes)
        if len(set(self.classes)) != num_classes:
            raise InvalidArgumentError("class names must be unique")
        if list(self.classes) != sorted(self.classes):
            raise InvalidArgumentError("class names must be sorted")
        seen = set()
        for s in self.samples:
            if not 0 <= s.class_index < num_classes:
                raise InvalidArgumentError(
                    f"sample {s.sample_id!r} has class_index {s.class_index} "
                    f"outside [0, {num_classes})"
                )
            if s.sample_id in seen:
                raise InvalidArgumentError(f"duplicate sample_id {s.sample_id!r}")
            seen.add(s.sample_id)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def per_class_counts(self) -> list[int]:
        counts = [0] * self.num_classes
        for s in self.samples:
            counts[s.class_index] += 1
        return counts

    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def fingerprint(self) -> str:
        """Hex digest identifying the catalog (classes, ids, resolution)."""
        import hashlib

        h = hashlib.sha256()
        h.update(repr(self.resolution).encode())
        for name in self.classes:
            h.update(name.encode() + b"\0")
        for s in self.samples:
            h.update(f"{s.sample_id}\0{s.relative_path}\0{s.class_index}\n".encode())
        return h.hexdigest()


@dataclass(frozen=True)
class SplitSpec:
    """Stratified train/test split parameters.

    The same (fraction, seed) on the same index always yields byte-identical
    splits.
    """

    train_fraction: float
    seed: int
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidArgumentError(
                f"train_fraction must lie in (0, 1), got {self.train_fraction}"
            )


@dataclass(frozen=True)
class MixupPolicy:
    """How mixup ratios are drawn: uniform on [0,1] or Beta(alpha, alpha)."""

    mode: str
    beta_alpha: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("uniform", "beta"):
            raise InvalidArgumentError(f"unknown mixup mode {self.mode!r}")
        if self.beta_alpha <= 0:
            raise InvalidArgumentError("beta_alpha must be positive")


@dataclass
class SoftBatch:
    """A batch of images with probability-vector labels.

    Labels are soft: each row sums to 1 (one-hot rows are the degenerate
    case). Mixup produces genuinely soft rows.
    """

    images: np.ndarray  # [B, H, W, 3] float32 in [0, 1]
    labels: np.ndarray  # [B, C] rows summing to 1
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise InvalidArgumentError("images and labels disagree on batch size")
        if self.sample_ids and len(self.sample_ids) != self.images.shape[0]:
            raise InvalidArgumentError("sample_ids length must match batch size")
        if np.any(self.labels < 0):
            raise InvalidArgumentError("labels must be non-negative")
        sums = self.labels.sum(axis=1)
        if self.labels.shape[0] and not np.allclose(sums, 1.0, atol=1e-6):
            raise InvalidArgumentError("each label row must sum to 1 +/- 1e-6")

    def __len__(self) -> int:
        return self.images.shape[0]


def scan_dataset(root: str | Path, resolution: tuple[int, int, int]) -> DatasetIndex:
    """Catalog a class-per-directory corpus.

    Classes are the subdirectory names of ``root``, sorted lexicographically;
    ``class_index`` follows that order. Sample ids are POSIX-style relative
    paths. Plain files directly under ``root`` are ignored.
    """
    root = Path(root)
    if not root.is_dir():
        raise NotFoundError(f"corpus root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise InvalidCorpusError(f"corpus root {root} contains no class directories")
    classes = tuple(p.name for p in class_dirs)
    samples = []
    for class_index, class_dir in enumerate(class_dirs):
        files = sorted(
            p for p in class_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not files:
            raise InvalidCorpusError(
                f"class directory {class_dir.name!r} contains no images"
            )
        for f in files:
            rel = f.relative_to(root).as_posix()
            samples.append(Sample(rel, rel, class_index))
    return DatasetIndex(root, classes, tuple(samples), tuple(resolution))


def _train_count(class_count: int, fraction: float) -> int:
    # Round half up so 700 * 0.1 -> 70 and 700 * 0.2 -> 140 exactly.
    return int(np.floor(class_count * fraction + 0.5))


def split_dataset(
    index: DatasetIndex, spec: SplitSpec
) -> tuple[DatasetIndex, DatasetIndex]:
    """Stratified split: per class, round(count * fraction) samples to train.

    Selection is a seeded shuffle per class; train and test partition the
    index exactly and keep the original sample order.
    """
    rng = np.random.default_rng(spec.seed)
    by_class: list[list[int]] = [[] for _ in index.classes]
    for pos, s in enumerate(index.samples):
        by_class[s.class_index].append(pos)
    train_positions = set()
    for class_index, positions in enumerate(by_class):
        n_train = _train_count(len(positions), spec.train_fraction)
        if len(positions) and n_train < 1:
            raise InvalidArgumentError(
                f"class {index.classes[class_index]!r} has {len(positions)} samples; "
                f"fraction {spec.train_fraction} leaves no training sample"
            )
        order = rng.permutation(len(positions))
        train_positions.update(positions[i] for i in order[:n_train])
    train_samples = tuple(
        s for pos, s in enumerate(index.samples) if pos in train_positions
    )
    test_samples = tuple(
        s for pos, s in enumerate(index.samples) if pos not in train_positions
    )
    train = replace(index, samples=train_samples)
    test = replace(index, samples=test_samples)
    return train, test


def export_split_manifest(
    train: DatasetIndex, test: DatasetIndex, out_path: str | Path
) -> None:
    """Write the split as CSV (sample_id,relative_path,class_index,split)."""
    out_path = Path(out_path)
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "relative_path", "class_index", "split"])
        for split_name, idx in (("train", train), ("test", test)):
            for s in idx.samples:
                writer.writerow([s.sample_id, s.relative_path, s.class_index, split_name])


def rotate_image(image: np.ndarray, angle: int) -> np.ndarray:
    """Rotate a square [H, W, C] (or [H, W]) image counterclockwise.

    Pure index permutation; the pixel multiset is preserved.
    """
    if angle not in ROTATION_ANGLES:
        raise InvalidArgumentError(f"angle must be one of {ROTATION_ANGLES}, got {angle}")
    if image.ndim < 2 or image.shape[0] != image.shape[1]:
        raise InvalidArgumentError(
            f"rotation requires a square image, got shape {image.shape}"
        )
    return np.ascontiguousarray(np.rot90(image, k=angle // 90, axes=(0, 1)))


def augment_rotations(index: DatasetIndex) -> DatasetIndex:
    """Expand the index 4x: each sample plus its 90/180/270 rotations.

    Rotated samples share the parent's relative path and class; the loader
    recognizes the ``#r<angle>`` id suffix and rotates after decoding.
    """
    samples = []
    for s in index.samples:
        samples.append(s)
        for angle in ROTATION_ANGLES:
            samples.append(
                Sample(s.sample_id + _ROTATION_SUFFIXES[angle], s.relative_path, s.class_index)
            )
    return replace(index, samples=tuple(samples))


def split_rotation_suffix(sample_id: str) -> tuple[str, int]:
    """Return (base sample id, rotation angle); angle 0 for originals."""
    for angle, suffix in _ROTATION_SUFFIXES.items():
        if sample_id.endswith(suffix):
            return sample_id[: -len(suffix)], angle
    return sample_id, 0


def mix_pairs(
    batch: SoftBatch, partners: np.ndarray, ratios: np.ndarray, tag: str
) -> SoftBatch:
    """Convex-combine each sample with its partner using one shared ratio.

    ``mixed[i] = r[i] * batch[i] + (1 - r[i]) * batch[partners[i]]`` for both
    the image and the label row.
    """
    if np.any(partners == np.arange(len(batch))):
        raise InvalidArgumentError("mixup partners must differ from their sample")
    if np.any((ratios < 0) | (ratios > 1)):
        raise InvalidArgumentError("mix ratios must lie in [0, 1]")
    r_img = ratios[:, None, None, None]
    images = r_img * batch.images + (1.0 - r_img) * batch.images[partners]
    r_lab = ratios[:, None]
    labels = r_lab * batch.labels + (1.0 - r_lab) * batch.labels[partners]
    ids = [
        f"{batch.sample_ids[i]}+{batch.sample_ids[j]}#{tag}{i}"
        for i, j in enumerate(partners)
    ]
    return SoftBatch(images.astype(batch.images.dtype), labels, ids)


def _draw_partners(rng: np.random.Generator, n: int) -> np.ndarray:
    # Uniform partner excluding self; repeats across pairs are allowed.
    j = rng.integers(0, n - 1, size=n)
    return j + (j >= np.arange(n))


def _draw_ratios(rng: np.random.Generator, policy: MixupPolicy, n: int) -> np.ndarray:
    if policy.mode == "uniform":
        return rng.random(n)
    return rng.beta(policy.beta_alpha, policy.beta_alpha, size=n)


def make_mixup_batch(
    base: SoftBatch, policy_u: MixupPolicy, policy_b: MixupPolicy
) -> SoftBatch:
    """Triple a batch: originals ++ uniform-ratio mixes ++ beta-ratio mixes.

    Each mixed sample pairs sample i with a seeded-random partner j != i from
    the same base batch; the image and label share one ratio per pair.
    """
    if policy_u.mode != "uniform" or policy_b.mode != "beta":
        raise InvalidArgumentError("expected a uniform policy then a beta policy")
    n = len(base)
    if n < 2:
        raise InvalidArgumentError("mixup needs a base batch of at least 2 samples")
    blocks = [base]
    for policy, tag in ((policy_u, "u"), (policy_b, "b")):
        rng = np.random.default_rng(policy.rng_seed)
        partners = _draw_partners(rng, n)
        ratios = _draw_ratios(rng, policy, n)
        blocks.append(mix_pairs(base, partners, ratios, tag))
    images = np.concatenate([b.images for b in blocks], axis=0)
    labels = np.concatenate([b.labels for b in blocks], axis=0)
    ids = [sid for b in blocks for sid in b.sample_ids]
    return SoftBatch(images, labels, ids)


class ImageLoader:
    """Decodes corpus images to float32 [0, 1] arrays at the index resolution.

    Decoded base images are cached in memory, so repeated epochs touch the
    disk once. Rotated sample ids are materialized with ``rotate_image``.
    """

    def __init__(self, index: DatasetIndex, cache: bool = True):
        self.index = index
        self._cache: dict[str, np.ndarray] | None = {} if cache else None
        self._by_id = {s.sample_id: s for s in index.samples}

    def _decode(self, relative_path: str) -> np.ndarray:
        height, width, channels = self.index.resolution
        if channels != 3:
            raise InvalidArgumentError("loader only supports 3-channel corpora")
        path = self.index.root / relative_path
        if not path.is_file():
            raise NotFoundError(f"image {path} does not exist")
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (width, height):
                img = img.resize((width, height), Image.BILINEAR)
            array = np.asarray(img, dtype=np.float32) / 255.0
        return array

    def load_sample(self, sample: Sample) -> np.ndarray:
        base_id, angle = split_rotation_suffix(sample.sample_id)
        if self._cache is not None and sample.relative_path in self._cache:
            image = self._cache[sample.relative_path]
        else:
            image = self._decode(sample.relative_path)
            if self._cache is not None:
                self._cache[sample.relative_path] = image
        if angle:
            image = rotate_image(image, angle)
        return image

    def load_batch(self, samples: Sequence[Sample]) -> np.ndarray:
        height, width, channels = self.index.resolution
        out = np.empty((len(samples), height, width, channels), dtype=np.float32)
        for i, sample in enumerate(samples):
            out[i] = self.load_sample(sample)
        return out

    def one_hot(self, samples: Sequence[Sample]) -> np.ndarray:
        labels = np.zeros((len(samples), self.index.num_classes))
        for i, sample in enumerate(samples):
            labels[i, sample.class_index] = 1.0
        return labels

    def soft_batch(self, samples: Sequence[Sample]) -> SoftBatch:
        return SoftBatch(
            self.load_batch(samples),
            self.one_hot(samples),
            [s.sample_id for s in samples],
        )


def iter_batches(
    samples: Sequence[Sample], batch_size: int, rng: np.random.Generator
) -> Iterable[list[Sample]]:
    """Seeded-shuffle epoch batching; trailing partial batches are dropped.

    A corpus smaller than one batch yields a single batch of everything.
    """
    order = rng.permutation(len(samples))
    if len(samples) < batch_size:
        yield [samples[i] for i in order]
        return
    for start in range(0, len(samples) - batch_size + 1, batch_size):
        yield [samples[i] for i in order[start : start + batch_size]]
