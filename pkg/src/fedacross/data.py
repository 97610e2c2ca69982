"""Synthetic glyph domains, the augmentation chain and k-shot support sets.

Every class owns a glyph made of a few line strokes. Samples are rendered from
that glyph with small per-sample jitter, and a ``DomainConfig`` then shifts the
rendering (rotation, contrast, brightness, additive noise). The per-sample
rendering depends only on the glyph bank and an instance seed, so two domains
built from the same instances differ exactly by their domain transform.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .codec import Reader, Writer
from .errors import ConfigError, ProtocolError, ScarcityError, StratificationError
from .numerics import make_rng

DATASET_MAGIC = b"FADS"
DATASET_VERSION = 1


@dataclass
class Sample:
    pixels: np.ndarray  # (H, W) in [0, 1]
    label: int
    id: int = -1

    @property
    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class DomainConfig:
    brightness_shift: float = 0.0
    contrast_scale: float = 1.0
    noise_std: float = 0.0
    rotation_deg: float = 0.0
    seed: int = 0


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W)
    labels: np.ndarray  # (N,)
    class_count: int
    domain_id: str = ""
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), int(self.ids[i]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], self.class_count,
                       self.domain_id, self.ids[index])

    def class_indices(self, n: int) -> np.ndarray:
        return np.flatnonzero(self.labels == n)


@dataclass
class SupportSet:
    """Exactly ``k`` samples for each selected class."""

    k: int
    classes: tuple[int, ...]
    per_class: dict[int, np.ndarray] = field(default_factory=dict)  # class -> (k, H, W)
    ids: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for n in self.classes:
            if len(self.per_class.get(n, ())) != self.k:
                raise ScarcityError(f"class {n} holds {len(self.per_class.get(n, ()))} samples, expected {self.k}")

    def __len__(self) -> int:
        return self.k * len(self.classes)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Images and labels, class by class in ascending class order."""
        if not len(self):
            return np.zeros((0, 0, 0)), np.zeros(0, dtype=np.int64)
        order = sorted(self.classes)
        images = np.concatenate([self.per_class[n] for n in order])
        labels = np.repeat(np.array(order, dtype=np.int64), self.k)
        return images, labels

    def counts(self) -> dict[int, int]:
        return {n: len(self.per_class[n]) for n in self.classes}


# -- glyph rendering -------------------------------------------------------

@dataclass
class GlyphBank:
    """Per-class stroke templates plus the seed that drives per-sample jitter."""

    strokes: np.ndarray  # (L, S, 4): y0, x0, y1, x1
    size: int = 16
    seed: int = 0
    width: float = 0.8
    jitter: float = 0.7
    shift: float = 1.2

    @property
    def class_count(self) -> int:
        return self.strokes.shape[0]


def make_glyph_bank(n_classes: int = 10, size: int = 16, strokes_per_class: int = 3,
                    seed: int = 0, **kwargs) -> GlyphBank:
    if n_classes <= 0:
        raise ConfigError("need at least one class")
    rng = make_rng([seed, 101])
    lo, hi = 0.2 * (size - 1), 0.8 * (size - 1)
    strokes = rng.uniform(lo, hi, size=(n_classes, strokes_per_class, 4))
    return GlyphBank(strokes, size, seed, **kwargs)


def _render_strokes(strokes: np.ndarray, size: int, width: float) -> np.ndarray:
    """strokes: (N, S, 4) -> images (N, size, size); max of Gaussian line profiles."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    p = np.stack([yy.ravel(), xx.ravel()], axis=-1)  # (P, 2)
    a = strokes[..., None, 0:2]  # (N, S, 1, 2)
    b = strokes[..., None, 2:4]
    ab = b - a
    t = ((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    d2 = ((p - closest) ** 2).sum(-1)  # (N, S, P)
    img = np.exp(-d2 / (2.0 * width ** 2)).max(axis=1)
    return img.reshape(-1, size, size)


def render_base(bank: GlyphBank, n_per_class: int, instance_seed: int | None = None):
    """Undistorted renderings, class-major. Returns ``(images, labels)``."""
    if bank.class_count == 0:
        raise ConfigError("glyph bank has no classes")
    if n_per_class < 1:
        raise ConfigError("n_per_class must be at least 1")
    seed = bank.seed if instance_seed is None else instance_seed
    rng = make_rng([bank.seed, seed, 202])
    L, S, _ = bank.strokes.shape
    labels = np.repeat(np.arange(L), n_per_class)
    strokes = bank.strokes[labels] + rng.normal(0.0, bank.jitter, size=(len(labels), S, 4))
    offset = rng.uniform(-bank.shift, bank.shift, size=(len(labels), 1, 2))
    strokes = strokes + np.concatenate([offset, offset], axis=-1)
    intensity = rng.uniform(0.75, 1.0, size=(len(labels), 1, 1))
    images = _render_strokes(strokes, bank.size, bank.width) * intensity
    return np.clip(images, 0.0, 1.0), labels


def apply_domain(images: np.ndarray, cfg: DomainConfig) -> np.ndarray:
    """Rotate, rescale contrast about 0.5, shift brightness, add noise, clamp."""
    out = np.array(images, dtype=np.float64)
    if cfg.rotation_deg:
        out = ndimage.rotate(out, cfg.rotation_deg, axes=(2, 1), reshape=False, order=1,
                             mode="constant", cval=0.0)
    if cfg.contrast_scale != 1.0:
        out = (out - 0.5) * cfg.contrast_scale + 0.5
    if cfg.brightness_shift:
        out = out + cfg.brightness_shift
    if cfg.noise_std:
        out = out + make_rng([cfg.seed, 303]).normal(0.0, cfg.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_domain(bank: GlyphBank, domain_cfg: DomainConfig, n_per_class: int,
                    instance_seed: int | None = None, domain_id: str = "") -> Dataset:
    base, labels = render_base(bank, n_per_class, instance_seed)
    return Dataset(apply_domain(base, domain_cfg), labels, bank.class_count, domain_id)


# -- augmentation ----------------------------------------------------------

def _bilinear_crop(images, top, left, side):
    """Resample the square window (top, left, side) of each image back to H x W."""
    B, H, W = images.shape
    step_y = side / H
    step_x = side / W
    ys = top[:, None] + (np.arange(H)[None, :] + 0.5) * step_y[:, None] - 0.5
    xs = left[:, None] + (np.arange(W)[None, :] + 0.5) * step_x[:, None] - 0.5
    ys = np.clip(ys, 0.0, H - 1)
    xs = np.clip(xs, 0.0, W - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, :, None]
    wx = (xs - x0)[:, None, :]
    bi = np.arange(B)[:, None, None]

    def g(yi, xi):
        return images[bi, yi[:, :, None], xi[:, None, :]]

    top_row = g(y0, x0) * (1 - wx) + g(y0, x1) * wx
    bottom_row = g(y1, x0) * (1 - wx) + g(y1, x1) * wx
    return top_row * (1 - wy) + bottom_row * wy


def augment_batch(images, rng: np.random.Generator, *, flip=None, scale=None,
                  center: bool = False, jitter: bool = True) -> np.ndarray:
    """Horizontal flip (p=0.5), random resized crop, brightness/contrast jitter.

    ``flip`` and ``scale`` force the respective decisions (scalar or per image);
    ``center`` places the crop window in the middle.
    """
    images = np.asarray(images, dtype=np.float64)
    B, H, W = images.shape
    flips = rng.random(B) < 0.5
    scales = rng.uniform(0.7, 1.0, size=B)
    u_top, u_left = rng.random(B), rng.random(B)
    bright = rng.uniform(0.9, 1.1, size=B)
    contrast = rng.uniform(0.9, 1.1, size=B)
    if flip is not None:
        flips = np.broadcast_to(np.asarray(flip, dtype=bool), (B,))
    if scale is not None:
        scales = np.broadcast_to(np.asarray(scale, dtype=np.float64), (B,))
    if center:
        u_top = u_left = np.full(B, 0.5)

    out = np.where(flips[:, None, None], images[:, :, ::-1], images)
    side = np.sqrt(scales) * H
    out = _bilinear_crop(out, u_top * (H - side), u_left * (W - side), side)
    if jitter:
        out = out * bright[:, None, None]
        mean = out.mean(axis=(1, 2), keepdims=True)
        out = (out - mean) * contrast[:, None, None] + mean
    return np.clip(out, 0.0, 1.0)


def augment(x: Sample, rng: np.random.Generator, **kwargs) -> Sample:
    out = augment_batch(x.pixels[None], rng, **kwargs)[0]
    return Sample(out, x.label, x.id)


def transform_eval(images) -> np.ndarray:
    """The augmentation chain with every random choice disabled: identity."""
    return np.array(images, dtype=np.float64)


# -- support sets and splits -----------------------------------------------

def select_classes(n_classes: int, count: int, rng: np.random.Generator) -> tuple[int, ...]:
    if count > n_classes:
        raise ConfigError(f"cannot select {count} of {n_classes} classes")
    return tuple(sorted(int(c) for c in rng.choice(n_classes, size=count, replace=False)))


def build_support_set(dataset: Dataset, k: int, classes=None, rng=None) -> SupportSet:
    if k < 0:
        raise ConfigError("k must be non-negative")
    rng = rng if rng is not None else make_rng(0)
    classes = tuple(sorted(range(dataset.class_count) if classes is None else classes))
    per_class, ids = {}, {}
    for n in classes:
        idx = dataset.class_indices(n)
        if len(idx) < k:
            raise ScarcityError(f"class {n} has {len(idx)} samples, k={k} requested")
        chosen = rng.choice(idx, size=k, replace=False)
        per_class[n] = dataset.images[chosen]
        ids[n] = dataset.ids[chosen]
    return SupportSet(k, classes, per_class, ids)


def split(dataset: Dataset, fractions=(0.8, 0.2), rng=None) -> tuple[Dataset, Dataset]:
    """Stratified split into (train, test)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"fractions must be two non-negative values summing to 1, got {fractions}")
    rng = rng if rng is not None else make_rng(0)
    train, test = [], []
    for n in np.unique(dataset.labels):
        idx = dataset.class_indices(n)
        if len(idx) < 2:
            raise StratificationError(f"class {n} has fewer than 2 samples")
        idx = rng.permutation(idx)
        cut = int(round(fractions[0] * len(idx)))
        train.append(idx[:cut])
        test.append(idx[cut:])
    train_idx = np.sort(np.concatenate(train))
    test_idx = np.sort(np.concatenate(test))
    return dataset.subset(train_idx), dataset.subset(test_idx)


# -- container format ------------------------------------------------------

def dataset_to_bytes(ds: Dataset) -> bytes:
    w = Writer()
    w.raw(DATASET_MAGIC)
    w.u32(DATASET_VERSION)
    H, W = ds.shape if len(ds) else (0, 0)
    for v in (H, W, ds.class_count, len(ds)):
        w.u32(v)
    w.text(ds.domain_id)
    w.array(ds.images.reshape(len(ds), H, W))
    w.array(ds.labels, dtype=">u4")
    w.array(ds.ids, dtype=">u8")
    return w.getvalue()


def dataset_from_bytes(data: bytes) -> Dataset:
    r = Reader(data)
    if r.raw() != DATASET_MAGIC:
        raise ProtocolError("not a dataset container")
    if r.u32() != DATASET_VERSION:
        raise ProtocolError("unsupported dataset container version")
    H, W, L, count = (r.u32() for _ in range(4))
    domain_id = r.text()
    images = r.array()
    labels = r.array(">u4", np.int64)
    ids = r.array(">u8", np.int64)
    r.expect_done()
    if images.shape != (count, H, W) or labels.shape != (count,):
        raise ProtocolError("dataset header does not match payload")
    return Dataset(images, labels, L, domain_id, ids)


def save_dataset(ds: Dataset, path, manifest_path=None):
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))
    if manifest_path is not None:
        with open(manifest_path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["index", "id", "label", "domain_id"])
            for i in range(len(ds)):
                out.writerow([i, int(ds.ids[i]), int(ds.labels[i]), ds.domain_id])


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
