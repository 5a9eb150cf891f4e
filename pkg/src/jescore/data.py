"""Noise schedules, augmentation, dataset files and the Gaussian-mixture oracle world.

Images live on the 0-255 pixel scale in NCHW layout. Randomness is always
driven by an explicit seed or ``numpy.random.Generator``.

The mixture world has class priors ``pi_c``, mean images ``mu_c`` and
isotropic variances ``tau_c^2``. Adding noise of variance ``sigma^2`` keeps it
a mixture with variances ``tau_c^2 + sigma^2``, so its noisy density, score,
posterior means and class posterior are all closed form.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

PathLike = Union[str, os.PathLike]


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# noise levels

@dataclass(frozen=True)
class NoiseSchedule:
    """Noise std drawn as the square of a uniform variable over [sqrt(lo), sqrt(hi)]."""

    sigma_min: float = 1.0
    sigma_max: float = 100.0

    def __post_init__(self):
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError(f"need 0 < sigma_min <= sigma_max, got {self.sigma_min}, {self.sigma_max}")

    def sample(self, n: int, rng) -> np.ndarray:
        return sample_sigma(self, _rng(rng).uniform(0.0, 1.0, size=n))


DENOISING_SCHEDULE = NoiseSchedule(1.0, 100.0)
CLASSIFICATION_SCHEDULE = NoiseSchedule(1.0, 20.0)


def sample_sigma(schedule: NoiseSchedule, u):
    """Map uniform draws ``u`` in [0, 1] to noise levels."""
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0) | (u > 1)) or np.any(~np.isfinite(u)):
        raise ValueError("u must lie in [0, 1]")
    lo, hi = math.sqrt(schedule.sigma_min), math.sqrt(schedule.sigma_max)
    sigma = (lo + u * (hi - lo)) ** 2
    return float(sigma) if sigma.ndim == 0 else sigma


# batches and augmentation

@dataclass
class ImageBatch:
    images: np.ndarray  # (N, C, H, W) float32, 0-255 scale
    labels: np.ndarray  # (N,) int64, 0-based class index
    num_classes: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be NCHW, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError("one label per image required")
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "ImageBatch":
        return ImageBatch(self.images[idx], self.labels[idx], self.num_classes)

    def torch_images(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.ascontiguousarray(self.images), dtype=dtype)


def add_noise(images, sigma, seed):
    """Return ``(y, eps)`` with ``y = x + sigma * eps`` and eps standard normal.

    ``sigma`` is a scalar or one value per image. No clipping.
    """
    x = np.asarray(images, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    eps = _rng(seed).standard_normal(x.shape)
    s = sigma.reshape(-1, *([1] * (x.ndim - 1))) if sigma.ndim == 1 else sigma
    return x + s * eps, eps


def hflip(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images[..., ::-1])


def random_hflip(images: np.ndarray, rng) -> np.ndarray:
    rng = _rng(rng)
    flip = rng.random(images.shape[0]) < 0.5
    out = images.copy()
    out[flip] = images[flip][..., ::-1]
    return out


def padded_random_crop(images: np.ndarray, pad: int, rng, return_offsets: bool = False):
    """Zero-pad by ``pad`` on each side, then crop back to the original size at a random offset."""
    if pad < 0:
        raise ValueError("pad must be nonnegative")
    rng = _rng(rng)
    n, _, h, w = images.shape
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    if pad == 0:
        out = images.copy()
    else:
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.empty_like(images)
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return (out, offsets) if return_offsets else out


# Gaussian mixture world

@dataclass
class GmmSpec:
    priors: np.ndarray  # (C,)
    means: np.ndarray   # (C, *image_shape)
    taus: np.ndarray    # (C,) per-class std in pixels

    def __post_init__(self):
        self.priors = np.asarray(self.priors, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.taus = np.asarray(self.taus, dtype=np.float64)
        c = self.priors.shape[0]
        if self.means.shape[0] != c or self.taus.shape != (c,):
            raise ValueError("priors, means and taus disagree on the class count")
        if np.any(self.priors < 0) or abs(self.priors.sum() - 1.0) > 1e-12:
            raise ValueError("priors must be nonnegative and sum to 1")
        if np.any(self.taus <= 0):
            raise ValueError("class variances must be positive")

    @property
    def num_classes(self) -> int:
        return self.priors.shape[0]

    @property
    def image_shape(self) -> tuple:
        return self.means.shape[1:]

    @property
    def dim(self) -> int:
        return int(np.prod(self.image_shape))

    def to_dict(self) -> dict:
        return {"priors": self.priors.tolist(), "means": self.means.tolist(), "taus": self.taus.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "GmmSpec":
        unknown = set(data) - {"priors", "means", "taus"}
        if unknown:
            raise ValueError(f"unknown gmm keys: {sorted(unknown)}")
        return cls(data["priors"], data["means"], data["taus"])

    def save(self, path: PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: PathLike) -> "GmmSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def two_class_world(size: int = 8, contrast: float = 7.0, tau: float = 30.0,
                    background: float = 128.0) -> GmmSpec:
    """Two equiprobable grayscale classes: top-bright vs left-bright half patterns."""
    half = size // 2
    top = -np.ones((size, size))
    top[:half] = 1.0
    left = -np.ones((size, size))
    left[:, :half] = 1.0
    means = background + contrast * np.stack([top, left])[:, None]
    return GmmSpec([0.5, 0.5], means, [tau, tau])


def gmm_sample(g: GmmSpec, n: int, seed) -> ImageBatch:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = _rng(seed)
    labels = rng.choice(g.num_classes, size=n, p=g.priors)
    noise = rng.standard_normal((n, *g.image_shape))
    images = g.means[labels] + g.taus[labels].reshape(-1, *([1] * len(g.image_shape))) * noise
    return ImageBatch(images.astype(np.float32), labels, g.num_classes)


def _flat(y) -> tuple[torch.Tensor, tuple]:
    y = torch.as_tensor(y, dtype=torch.float64)
    return y.reshape(y.shape[0], -1), y.shape


def _component_logpdf(g: GmmSpec, yf: torch.Tensor, sigma) -> torch.Tensor:
    """(N, C) log pi_c + log N(y; mu_c, (tau_c^2 + sigma^2) I)."""
    mu = torch.as_tensor(g.means.reshape(g.num_classes, -1))
    var = torch.as_tensor(g.taus ** 2) + float(sigma) ** 2
    d = yf.shape[1]
    sq = ((yf[:, None, :] - mu[None]) ** 2).sum(-1)
    with np.errstate(divide="ignore"):
        log_prior = torch.as_tensor(np.log(g.priors))
    return log_prior - 0.5 * d * torch.log(2 * math.pi * var) - 0.5 * sq / var


def gmm_log_density_noisy(g: GmmSpec, y, sigma: float) -> torch.Tensor:
    """Exact log p_sigma(y) per sample, double precision."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    yf, _ = _flat(y)
    return torch.logsumexp(_component_logpdf(g, yf, sigma), dim=1)


def gmm_log_cond_class(g: GmmSpec, y, sigma: float) -> torch.Tensor:
    """(N, C) log posterior class probabilities under noise ``sigma``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    yf, _ = _flat(y)
    comp = _component_logpdf(g, yf, sigma)
    return comp - torch.logsumexp(comp, dim=1, keepdim=True)


def _check_positive(sigma):
    if sigma <= 0:
        raise ValueError("sigma must be positive; at sigma=0 the clean image is its own estimate")


def gmm_score_noisy(g: GmmSpec, y, sigma: float) -> torch.Tensor:
    """grad_y log p_sigma(y) = -sum_c r_c (y - mu_c) / (tau_c^2 + sigma^2)."""
    _check_positive(sigma)
    yf, shape = _flat(y)
    r = torch.exp(gmm_log_cond_class(g, y, sigma))
    mu = torch.as_tensor(g.means.reshape(g.num_classes, -1))
    var = torch.as_tensor(g.taus ** 2) + float(sigma) ** 2
    per_class = -(yf[:, None, :] - mu[None]) / var[None, :, None]
    return (r[:, :, None] * per_class).sum(1).reshape(shape)


def _shrink(g: GmmSpec, sigma):
    tau2 = torch.as_tensor(g.taus ** 2)
    return tau2 / (tau2 + float(sigma) ** 2)


def gmm_posterior_mean_cond(g: GmmSpec, y, c, sigma: float) -> torch.Tensor:
    """E[x | y, c] = mu_c + tau_c^2 / (tau_c^2 + sigma^2) (y - mu_c)."""
    _check_positive(sigma)
    yf, shape = _flat(y)
    c = torch.as_tensor(c, dtype=torch.long).expand(yf.shape[0])
    mu = torch.as_tensor(g.means.reshape(g.num_classes, -1))[c]
    k = _shrink(g, sigma)[c][:, None]
    return (mu + k * (yf - mu)).reshape(shape)


def gmm_posterior_mean(g: GmmSpec, y, sigma: float) -> torch.Tensor:
    """E[x | y], the responsibility-weighted conditional posterior means."""
    _check_positive(sigma)
    yf, shape = _flat(y)
    r = torch.exp(gmm_log_cond_class(g, y, sigma))
    mu = torch.as_tensor(g.means.reshape(g.num_classes, -1))
    k = _shrink(g, sigma)
    cond = mu[None] + k[None, :, None] * (yf[:, None, :] - mu[None])
    return (r[:, :, None] * cond).sum(1).reshape(shape)


def bayes_accuracy(g: GmmSpec, batch: ImageBatch, sigma: float = 0.0) -> float:
    """Accuracy of the oracle classifier on ``batch``."""
    pred = gmm_log_cond_class(g, batch.images, sigma).argmax(1).numpy()
    return float((pred == batch.labels).mean())


class GmmOracleModel:
    """Adapter exposing the oracle at a fixed noise level through the model interface.

    Lets analysis and evaluation code run unchanged on the closed-form world.
    """

    def __init__(self, g: GmmSpec, sigma: float):
        self.g, self.sigma = g, float(sigma)
        self.num_classes = g.num_classes

    def log_marginal_unnorm(self, y):
        return gmm_log_density_noisy(self.g, y, self.sigma)

    def log_cond_class(self, y):
        return gmm_log_cond_class(self.g, y, self.sigma)

    def score_marginal(self, y, create_graph=False):
        return gmm_score_noisy(self.g, y, self.sigma).to(torch.as_tensor(y).dtype)

    def denoise_uncond(self, y, sigma, create_graph=False):
        return gmm_posterior_mean(self.g, y, sigma).to(torch.as_tensor(y).dtype)

    def denoise_cond(self, y, c, sigma, create_graph=False):
        return gmm_posterior_mean_cond(self.g, y, c, sigma).to(torch.as_tensor(y).dtype)

    def predict(self, y):
        return self.log_cond_class(y).argmax(1)


# on-disk formats

MANIFEST = "manifest.json"
_PIXEL_DTYPES = {"u8": "<u1", "f32": "<f4"}


def save_dataset(directory: PathLike, batch: ImageBatch, pixel_dtype: str = "f32") -> Path:
    """Write a manifest plus little-endian row-major pixel and label blobs."""
    if pixel_dtype not in _PIXEL_DTYPES:
        raise DataError(f"pixel_dtype must be one of {sorted(_PIXEL_DTYPES)}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = batch.images
    if pixel_dtype == "u8":
        if np.any((images < 0) | (images > 255)) or np.any(images != np.round(images)):
            raise DataError("u8 storage needs integer pixels in [0, 255]")
    pixels = np.ascontiguousarray(images, dtype=_PIXEL_DTYPES[pixel_dtype])
    if batch.labels.size and (batch.labels.min() < 0 or batch.labels.max() >= 2 ** 16):
        raise DataError("labels must fit in u16")
    labels = np.ascontiguousarray(batch.labels, dtype="<u2")
    (directory / "pixels.bin").write_bytes(pixels.tobytes())
    (directory / "labels.bin").write_bytes(labels.tobytes())
    manifest = {
        "format": "jescore-dataset",
        "version": 1,
        "shape": list(images.shape),
        "pixel_dtype": pixel_dtype,
        "label_dtype": "u16",
        "num_classes": int(batch.num_classes),
        "pixels": "pixels.bin",
        "labels": "labels.bin",
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(path: PathLike) -> ImageBatch:
    """Load a dataset from its directory or manifest path."""
    path = Path(path)
    manifest_path = path / MANIFEST if path.is_dir() else path
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent
    try:
        shape = tuple(int(s) for s in manifest["shape"])
        dtype = _PIXEL_DTYPES[manifest["pixel_dtype"]]
        num_classes = int(manifest["num_classes"])
        raw_pixels = (root / manifest["pixels"]).read_bytes()
        raw_labels = (root / manifest["labels"]).read_bytes()
    except (KeyError, OSError, ValueError) as exc:
        raise DataError(f"bad manifest {manifest_path}: {exc}") from exc
    if len(shape) != 4:
        raise DataError("dataset shape must be NCHW")
    pixels = np.frombuffer(raw_pixels, dtype=dtype)
    labels = np.frombuffer(raw_labels, dtype="<u2")
    if pixels.size != int(np.prod(shape)):
        raise DataError(f"pixel blob has {pixels.size} values, manifest says {int(np.prod(shape))}")
    if labels.size != shape[0]:
        raise DataError(f"label blob has {labels.size} entries for {shape[0]} images")
    if labels.size and labels.max() >= num_classes:
        raise DataError("label outside [0, num_classes)")
    images = pixels.reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(images)):
        raise DataError("non-finite pixel values")
    return ImageBatch(images, labels.astype(np.int64), num_classes)


CIFAR_RECORD = 1 + 3 * 32 * 32


def read_cifar10_binary(source: Union[PathLike, bytes]) -> ImageBatch:
    """Parse the CIFAR-10 binary format: 1 label byte + 3072 channel-major pixel bytes per record."""
    raw = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataError(f"{len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"label {labels.max()} outside 0-9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32)
    return ImageBatch(images, labels, 10)


def write_cifar10_binary(batch: ImageBatch) -> bytes:
    """Inverse of ``read_cifar10_binary`` for uint8-valued images."""
    images = np.asarray(batch.images).reshape(len(batch), -1).astype(np.uint8)
    return np.concatenate([batch.labels.astype(np.uint8)[:, None], images], axis=1).tobytes()
