"""Datasets, splits, per-member data orders and augmentation policies."""

from __future__ import annotations

import gzip
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

OPTDIGITS_FEATURES = 64
OPTDIGITS_IMAGE = (1, 8, 8)
CIFAR_RECORD = 3073
CIFAR_IMAGE = (3, 32, 32)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    image_shape: Optional[tuple] = None  # (C, H, W) when inputs are images, flat or not

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels out of range")

    @property
    def n(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx])

    def as_images(self) -> "Dataset":
        if self.image_shape is None:
            raise ValueError("dataset has no image shape")
        return replace(self, inputs=self.inputs.reshape((self.n,) + tuple(self.image_shape)))


@dataclass
class Batch:
    x: np.ndarray
    t: np.ndarray


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


def _open_text(path):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rt")
    return open(path, "r")


def load_optdigits(path) -> Dataset:
    """Load the UCI optdigits CSV (64 integers in [0, 16] plus a label per row).

    Features are scaled to [0, 1]. Gzipped files are accepted.
    """
    rows = []
    labels = []
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != OPTDIGITS_FEATURES + 1:
                raise DataFormatError(f"{path}:{lineno}: expected 65 fields, got {len(fields)}")
            try:
                vals = [int(f) for f in fields]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer field") from None
            feats, label = vals[:-1], vals[-1]
            if min(feats) < 0 or max(feats) > 16:
                raise DataFormatError(f"{path}:{lineno}: feature out of range [0, 16]")
            if not 0 <= label <= 9:
                raise DataFormatError(f"{path}:{lineno}: label {label} out of range [0, 9]")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: no records")
    x = np.asarray(rows, dtype=np.float32) / np.float32(16.0)
    return Dataset(x, np.asarray(labels, dtype=np.int64), 10, OPTDIGITS_IMAGE)


def bundled_optdigits_path() -> Optional[Path]:
    """Path of the optdigits test file shipped with scikit-learn, if installed."""
    import importlib.util

    spec = importlib.util.find_spec("sklearn")
    if spec is None or not spec.submodule_search_locations:
        return None
    path = Path(list(spec.submodule_search_locations)[0]) / "datasets" / "data" / "digits.csv.gz"
    return path if path.exists() else None


def load_cifar10_binary(path, mean=CIFAR_MEAN, std=CIFAR_STD, pattern="data_batch_*.bin") -> Dataset:
    """Load CIFAR-10 binary records from a file or from every matching file in a directory."""
    path = Path(path)
    files = sorted(path.glob(pattern)) if path.is_dir() else [path]
    if not files:
        raise DataFormatError(f"{path}: no files matching {pattern}")
    xs, ys = [], []
    for f in files:
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD:
            raise DataFormatError(f"{f}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
        rec = raw.reshape(-1, CIFAR_RECORD)
        labels = rec[:, 0].astype(np.int64)
        if labels.max() > 9:
            raise DataFormatError(f"{f}: label {labels.max()} out of range")
        ys.append(labels)
        xs.append(rec[:, 1:].reshape((-1,) + CIFAR_IMAGE))
    x = np.concatenate(xs).astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
    x = (x - m) / s
    return Dataset(x, np.concatenate(ys), 10, CIFAR_IMAGE)


def synthetic_blobs(n=600, n_classes=4, dim=16, seed=0, spread=1.0) -> Dataset:
    """Gaussian blobs around random unit-scale centers; for fast tests only."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 3.0, size=(n_classes, dim))
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    x = centers[labels] + rng.normal(0.0, spread, size=(n, dim))
    return Dataset(x.astype(np.float32), labels.astype(np.int64), n_classes, None)


# ---------------------------------------------------------------------------
# Splits and orders
# ---------------------------------------------------------------------------


def holdout_split(ds: Dataset, fraction: float, seed: int):
    """Random disjoint (train, eval) split with ``round(fraction * n)`` eval samples."""
    if not 0 <= fraction < 1:
        raise ValueError(f"holdout fraction must be in [0, 1), got {fraction}")
    n_eval = int(np.floor(fraction * ds.n + 0.5))
    perm = np.random.default_rng(seed).permutation(ds.n)
    eval_idx = np.sort(perm[:n_eval])
    train_idx = np.sort(perm[n_eval:])
    return ds.subset(train_idx), ds.subset(eval_idx)


def epoch_order(n: int, member_seed: int, epoch: int) -> np.ndarray:
    if n <= 0:
        raise ValueError("n must be positive")
    ss = np.random.SeedSequence(entropy=member_seed, spawn_key=(0x0D, epoch))
    return np.random.default_rng(ss).permutation(n)


# ---------------------------------------------------------------------------
# Augmentation policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    mixup_alpha: float = 0.0
    label_smooth_alpha: float = 0.0
    cutmix_lambda: float = 0.0
    erase_prob: float = 0.0

    def __post_init__(self):
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be >= 0")
        if not 0 <= self.label_smooth_alpha < 1:
            raise ValueError("label_smooth_alpha must be in [0, 1)")
        if not 0 <= self.cutmix_lambda <= 1:
            raise ValueError("cutmix_lambda must be in [0, 1]")
        if not 0 <= self.erase_prob <= 1:
            raise ValueError("erase_prob must be in [0, 1]")

    @property
    def is_identity(self) -> bool:
        return not (self.mixup_alpha or self.label_smooth_alpha or self.cutmix_lambda or self.erase_prob)


NO_AUGMENT = AugmentPolicy()


@dataclass(frozen=True)
class AugmentGrids:
    mixup: tuple = (0.0, 0.5, 1.0)
    label_smooth: tuple = (0.0, 0.05, 0.10)
    cutmix: tuple = (0.0, 0.5, 1.0)
    erase: tuple = (0.0, 0.15, 0.35)

    @classmethod
    def imagenet(cls) -> "AugmentGrids":
        return cls(mixup=(0.0, 0.2), label_smooth=(0.0, 0.10), cutmix=(0.0, 1.0), erase=(0.0, 0.35))

    @classmethod
    def none(cls) -> "AugmentGrids":
        return cls(mixup=(0.0,), label_smooth=(0.0,), cutmix=(0.0,), erase=(0.0,))


def sample_policy(rng: np.random.Generator, grids: AugmentGrids = AugmentGrids()) -> AugmentPolicy:
    """Independent uniform draw from each transform's grid."""
    vals = []
    for name in ("mixup", "label_smooth", "cutmix", "erase"):
        grid = getattr(grids, name)
        if len(grid) == 0:
            raise ValueError(f"augmentation grid {name!r} is empty")
        vals.append(float(grid[rng.integers(len(grid))]))
    return AugmentPolicy(*vals)


def one_hot(labels, n_classes, dtype=np.float32):
    t = np.zeros((len(labels), n_classes), dtype=dtype)
    t[np.arange(len(labels)), labels] = 1
    return t


def _cutmix(x, t, lam_box, rng):
    n, _, h, w = x.shape
    perm = rng.permutation(n)
    cut = np.sqrt(1.0 - lam_box)
    ch, cw = int(h * cut), int(w * cut)
    cy, cx = rng.integers(h), rng.integers(w)
    y0, y1 = np.clip(cy - ch // 2, 0, h), np.clip(cy + ch // 2 + ch % 2, 0, h)
    x0, x1 = np.clip(cx - cw // 2, 0, w), np.clip(cx + cw // 2 + cw % 2, 0, w)
    x[:, :, y0:y1, x0:x1] = x[perm][:, :, y0:y1, x0:x1]
    lam = 1.0 - (y1 - y0) * (x1 - x0) / (h * w)
    return x, lam * t + (1.0 - lam) * t[perm]


def _random_erase(img, rng, scale=(0.02, 0.33), ratio=(0.3, 3.3)):
    _, h, w = img.shape
    area = h * w
    for _ in range(10):
        target = rng.uniform(*scale) * area
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        eh = int(round(np.sqrt(target * aspect)))
        ew = int(round(np.sqrt(target / aspect)))
        if 0 < eh <= h and 0 < ew <= w:
            y0 = rng.integers(h - eh + 1)
            x0 = rng.integers(w - ew + 1)
            img[:, y0 : y0 + eh, x0 : x0 + ew] = 0
            return


def apply_policy(indices, ds: Dataset, policy: AugmentPolicy, rng: np.random.Generator) -> Batch:
    """Build a soft-labeled batch.

    Mixup or CutMix (fair coin when both are active), then random erasing on
    the inputs, then label smoothing on the targets.
    """
    indices = np.asarray(indices)
    x = ds.inputs[indices].copy()
    t = one_hot(ds.labels[indices], ds.n_classes, dtype=np.float64)
    if policy.is_identity:
        return Batch(x, t.astype(np.float32))

    needs_image = policy.cutmix_lambda > 0 or policy.erase_prob > 0
    if needs_image and ds.image_shape is None:
        raise ValueError("cutmix / random erasing requested on non-image data")
    flat_shape = x.shape
    if needs_image:
        x = x.reshape((len(indices),) + tuple(ds.image_shape))

    use_mixup = policy.mixup_alpha > 0
    use_cutmix = policy.cutmix_lambda > 0
    if use_mixup and use_cutmix:
        if rng.random() < 0.5:
            use_cutmix = False
        else:
            use_mixup = False
    if use_mixup:
        lam = rng.beta(policy.mixup_alpha, policy.mixup_alpha)
        perm = rng.permutation(len(indices))
        x = (lam * x + (1.0 - lam) * x[perm]).astype(ds.inputs.dtype)
        t = lam * t + (1.0 - lam) * t[perm]
    elif use_cutmix and rng.random() < policy.cutmix_lambda:
        x, t = _cutmix(x, t, rng.beta(1.0, 1.0), rng)

    if policy.erase_prob > 0:
        for i in range(len(x)):
            if rng.random() < policy.erase_prob:
                _random_erase(x[i], rng)

    if policy.label_smooth_alpha > 0:
        a = policy.label_smooth_alpha
        t = (1.0 - a) * t + a / ds.n_classes

    return Batch(x.reshape(flat_shape), t.astype(np.float32))
