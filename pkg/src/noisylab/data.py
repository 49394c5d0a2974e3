"""Datasets, label-noise injection and image augmentations."""

from __future__ import annotations

import dataclasses
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "CifarFormatError",
    "LabeledDataset",
    "NoisySplit",
    "AugmentationConfig",
    "SSL_AUGMENTATION",
    "SUPERVISED_AUGMENTATION",
    "NO_AUGMENTATION",
    "derive_rng",
    "derive_seed",
    "load_cifar_binary",
    "generate_synthetic",
    "parse_dataset_name",
    "load_dataset",
    "inject_noise",
    "channel_stats",
    "standardize",
    "augment_view",
    "augment_batch",
]

CIFAR_PIXELS = 32 * 32 * 3


class CifarFormatError(ValueError):
    pass


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Independent generator keyed by ``seed`` and any mix of int/str tags."""
    words = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        words.append(zlib.crc32(t.encode()) if isinstance(t, str) else int(t) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def derive_seed(seed: int, *tags) -> int:
    return int(derive_rng(seed, *tags).integers(0, 2**31 - 1))


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (n, H, W, 3) uint8
    labels: np.ndarray  # (n,) int64
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ValueError(f"images must be n x H x W x 3, got {self.images.shape}")
        if self.images.dtype != np.uint8:
            raise ValueError(f"images must be uint8, got {self.images.dtype}")
        if len(self.labels) < 1 or len(self.labels) != len(self.images):
            raise ValueError(
                f"need n >= 1 matching labels; {len(self.images)} images, {len(self.labels)} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class NoisySplit:
    """Dataset plus corrupted labels. ``base.labels`` and the mask are for scoring only."""

    base: LabeledDataset
    noisy_labels: np.ndarray
    corrupted_mask: np.ndarray
    eta: float

    @property
    def images(self) -> np.ndarray:
        return self.base.images

    @property
    def num_classes(self) -> int:
        return self.base.num_classes

    def __len__(self) -> int:
        return len(self.base)


# ------------------------------------------------------------------ loading


def load_cifar_binary(path, expected_K: int = 10) -> LabeledDataset:
    """Read the CIFAR binary record format.

    10-class files hold 3073-byte records (label, then 1024 R, G, B bytes);
    100-class files hold 3074-byte records (coarse, fine, pixels) and the fine
    label is used.
    """
    raw = Path(path).read_bytes()
    label_bytes = 2 if expected_K == 100 else 1
    record = label_bytes + CIFAR_PIXELS
    if len(raw) == 0:
        raise CifarFormatError(f"{path}: empty file")
    if len(raw) % record:
        raise CifarFormatError(
            f"{path}: {len(raw)} bytes is not a multiple of the {record}-byte record "
            f"(remainder {len(raw) % record})"
        )
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = buf[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= expected_K)
    if bad.size:
        i = int(bad[0])
        raise CifarFormatError(
            f"{path}: label {labels[i]} >= {expected_K} in record {i} "
            f"(byte offset {i * record + label_bytes - 1})"
        )
    images = buf[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return LabeledDataset(np.ascontiguousarray(images), labels, expected_K, Path(path).name)


def generate_synthetic(K: int, n_per_class: int, H: int, seed: int, *,
                       angle_jitter: float = 0.12, period_range=(2.5, 6.0),
                       color_jitter: float = 0.08, brightness_range=(0.75, 1.25),
                       contrast_range=(0.5, 1.5), pixel_noise: float = 0.08) -> LabeledDataset:
    """Procedural striped-texture classes.

    Class k has stripes at +-(pi/2)*k/(K-1) from vertical, the sign drawn per
    image, and its own two-colour palette. The random sign makes every class
    closed under horizontal flips, as natural image classes are, so flipping
    never turns one class into another. Each image also draws an orientation
    jitter, stripe period, phase, translation, palette perturbation,
    brightness/contrast change and Gaussian pixel noise. Palettes depend only
    on K, so differently seeded splits share class definitions.
    """
    if K < 2 or n_per_class < 1 or H < 2:
        raise ValueError(f"need K >= 2, n_per_class >= 1, H >= 2; got {K}, {n_per_class}, {H}")
    rng = derive_rng(seed, "synthetic", K, n_per_class, H)
    base = derive_rng(0, "palette", K).uniform(0.15, 0.85, size=(K, 2, 3))

    yy, xx = np.mgrid[0:H, 0:H].astype(np.float64)
    n = K * n_per_class
    labels = np.repeat(np.arange(K), n_per_class)
    images = np.empty((n, H, H, 3), dtype=np.uint8)
    for i, k in enumerate(labels):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        theta = sign * (np.pi / 2) * k / (K - 1) + rng.normal(0.0, angle_jitter)
        period = rng.uniform(*period_range)
        phase = rng.uniform(0, 2 * np.pi)
        dy, dx = rng.integers(0, H, size=2)
        u = ((xx + dx) * np.cos(theta) + (yy + dy) * np.sin(theta)) * (2 * np.pi / period)
        s = 0.5 + 0.5 * np.sin(u + phase)
        colors = np.clip(base[k] + rng.normal(0.0, color_jitter, size=(2, 3)), 0, 1)
        img = colors[0] * (1 - s[..., None]) + colors[1] * s[..., None]
        mu = img.mean()
        img = (img - mu) * rng.uniform(*contrast_range) + mu
        img = img * rng.uniform(*brightness_range)
        img = img + rng.normal(0.0, pixel_noise, size=img.shape)
        images[i] = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return LabeledDataset(images, labels, K, f"synthetic:K={K},n={n},H={H}")


_SYNTH = re.compile(r"^synthetic:K=(\d+),n=(\d+),H=(\d+)$")


def parse_dataset_name(name: str) -> dict:
    """``synthetic:K=<k>,n=<n>,H=<h>`` (n = total examples) or ``cifar10:<path>`` /
    ``cifar100:<path>``."""
    name = name.strip()
    m = _SYNTH.match(name)
    if m:
        K, n, H = (int(v) for v in m.groups())
        if n % K:
            raise ValueError(f"{name}: n={n} must be a multiple of K={K}")
        return {"kind": "synthetic", "K": K, "n": n, "H": H}
    for prefix, K in (("cifar10:", 10), ("cifar100:", 100)):
        if name.startswith(prefix):
            return {"kind": "cifar", "K": K, "path": name[len(prefix):]}
    raise ValueError(f"unrecognised dataset name {name!r}")


def load_dataset(name: str, seed: int = 0) -> LabeledDataset:
    info = parse_dataset_name(name)
    if info["kind"] == "synthetic":
        return generate_synthetic(info["K"], info["n"] // info["K"], info["H"], seed)
    return load_cifar_binary(info["path"], info["K"])


# -------------------------------------------------------------------- noise


def inject_noise(dataset: LabeledDataset, eta: float, seed: int) -> NoisySplit:
    """Flip exactly round(eta * n) labels, each to a uniformly drawn different class."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    n, K = len(dataset), dataset.num_classes
    count = int(np.floor(eta * n + 0.5))
    if count and K < 2:
        raise ValueError("cannot flip labels with fewer than 2 classes")
    rng = derive_rng(seed, "noise")
    chosen = rng.permutation(n)[:count]
    noisy = dataset.labels.copy()
    noisy[chosen] = (noisy[chosen] + rng.integers(1, K, size=count)) % K
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    noisy.flags.writeable = False
    mask.flags.writeable = False
    return NoisySplit(dataset, noisy, mask, float(eta))


# ------------------------------------------------------------- augmentation

STAGES = ("crop", "flip", "jitter", "grayscale", "blur")


@dataclass(frozen=True)
class AugmentationConfig:
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_strengths: tuple[float, float, float] = (0.4, 0.4, 0.4)
    grayscale_prob: float = 0.1
    blur_sigma_range: tuple[float, float] = (0.1, 1.0)
    enabled: frozenset = field(default_factory=lambda: frozenset(STAGES))
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop scale range must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        for p in (self.flip_prob, self.grayscale_prob):
            if not 0 <= p <= 1:
                raise ValueError(f"probability {p} outside [0, 1]")
        if any(s < 0 for s in self.jitter_strengths):
            raise ValueError("jitter strengths must be non-negative")
        if not 0 <= self.blur_sigma_range[0] <= self.blur_sigma_range[1]:
            raise ValueError(f"bad blur sigma range {self.blur_sigma_range}")
        unknown = set(self.enabled) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown augmentation stages {sorted(unknown)}")
        if any(s <= 0 for s in self.std):
            raise ValueError("std must be positive")
        object.__setattr__(self, "enabled", frozenset(self.enabled))

    def with_stats(self, mean, std) -> "AugmentationConfig":
        return dataclasses.replace(self, mean=tuple(map(float, mean)), std=tuple(map(float, std)))


SSL_AUGMENTATION = AugmentationConfig()
SUPERVISED_AUGMENTATION = AugmentationConfig(
    crop_scale_range=(0.8, 1.0), enabled=frozenset({"crop", "flip"})
)
NO_AUGMENTATION = AugmentationConfig(enabled=frozenset())

_GRAY = np.array([0.299, 0.587, 0.114])


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.reshape(-1, 3).astype(np.float64) / 255.0
    return x.mean(axis=0), x.std(axis=0)


def standardize(images: np.ndarray, config: AugmentationConfig) -> np.ndarray:
    """uint8 or [0,1] images -> per-channel standardized float64."""
    x = images.astype(np.float64)
    if images.dtype == np.uint8:
        x = x / 255.0
    return (x - np.asarray(config.mean)) / np.asarray(config.std)


def _resized_crop(img: np.ndarray, scale, rng: np.random.Generator) -> np.ndarray:
    H, W = img.shape[:2]
    area = H * W * rng.uniform(*scale)
    log_ratio = rng.uniform(np.log(3 / 4), np.log(4 / 3))
    ratio = np.exp(log_ratio)
    w = min(np.sqrt(area * ratio), W)
    h = min(np.sqrt(area / ratio), H)
    top = rng.uniform(0, H - h)
    left = rng.uniform(0, W - w)
    ys = top + (np.arange(H) + 0.5) * (h / H) - 0.5
    xs = left + (np.arange(W) + 0.5) * (w / W) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty_like(img)
    for c in range(3):
        out[..., c] = ndimage.map_coordinates(img[..., c], [gy, gx], order=1, mode="nearest")
    return out


def _jitter(img: np.ndarray, strengths, rng: np.random.Generator) -> np.ndarray:
    b, c, s = (rng.uniform(max(0.0, 1 - v), 1 + v) for v in strengths)
    img = np.clip(img * b, 0, 1)
    gray_mean = (img @ _GRAY).mean()
    img = np.clip((img - gray_mean) * c + gray_mean, 0, 1)
    gray = (img @ _GRAY)[..., None]
    return np.clip(gray + (img - gray) * s, 0, 1)


def augment_view(image: np.ndarray, config: AugmentationConfig,
                 stream: np.random.Generator) -> np.ndarray:
    """One augmented, standardized float view of an H x W x 3 image.

    Stages run in the fixed order crop, flip, jitter, grayscale, blur. Every
    enabled stage consumes its random draws even when its coin flip says skip,
    so the stream advances identically for a given config.
    """
    img = image.astype(np.float64)
    if image.dtype == np.uint8:
        img = img / 255.0
    on = config.enabled
    if "crop" in on:
        img = _resized_crop(img, config.crop_scale_range, stream)
    if "flip" in on and stream.random() < config.flip_prob:
        img = img[:, ::-1]
    if "jitter" in on:
        img = _jitter(img, config.jitter_strengths, stream)
    if "grayscale" in on and stream.random() < config.grayscale_prob:
        img = np.repeat((img @ _GRAY)[..., None], 3, axis=2)
    if "blur" in on:
        sigma = stream.uniform(*config.blur_sigma_range)
        if sigma > 0:
            img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
    return (img - np.asarray(config.mean)) / np.asarray(config.std)


def augment_batch(images: np.ndarray, indices: np.ndarray, config: AugmentationConfig,
                  seed: int, *tags) -> np.ndarray:
    """Augment ``images[indices]``; example i uses a stream keyed by (seed, tags, i)."""
    if not config.enabled:
        return standardize(images[indices], config)
    return np.stack(
        [augment_view(images[i], config, derive_rng(seed, *tags, int(i))) for i in indices]
    )
