"""Synthetic LR formation: anisotropic Gaussian blur, bicubic ``s``-fold
downsampling, then additive white Gaussian noise, in that order.

Images are float64 arrays of shape (H, W, 3) in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

KERNEL_SIZE = 21


@dataclass(frozen=True)
class DegradationSpec:
    """Ground-truth degradation of one LR image.

    ``sigma`` is on the 0-255 intensity scale; ``theta`` is in radians.
    """

    lambda1: float
    lambda2: float
    theta: float
    sigma: float
    scale: int = 4

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError(f"kernel widths must be positive, got {self.lambda1}, {self.lambda2}")
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")
        if int(self.scale) != self.scale or self.scale < 1:
            raise ValueError(f"scale must be a positive integer, got {self.scale}")

    @property
    def kernel_params(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.theta)

    def to_record(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_record(cls, text: str) -> "DegradationSpec":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        try:
            return cls(
                lambda1=float(values["lambda1"]),
                lambda2=float(values["lambda2"]),
                theta=float(values["theta"]),
                sigma=float(values["sigma"]),
                scale=int(values.get("scale", 4)),
            )
        except KeyError as exc:
            raise ValueError(f"degradation record is missing {exc.args[0]!r}") from None


@dataclass
class LrHrPair:
    hr: np.ndarray
    lr: np.ndarray
    spec: DegradationSpec
    seed: int


@dataclass
class SamplerConfig:
    """Ranges for random degradations.

    ``kernels`` / ``noise_levels``, when given, replace the continuous
    ranges with a finite set (the toy worlds used for desk experiments).
    """

    lambda_range: tuple[float, float] = (0.2, 4.0)
    theta_range: tuple[float, float] = (0.0, math.pi)
    sigma_range: tuple[float, float] = (0.0, 25.0)
    scale: int = 4
    kernels: list[tuple[float, float, float]] = field(default_factory=list)
    noise_levels: list[float] = field(default_factory=list)


def make_aniso_gaussian_kernel(lambda1: float, lambda2: float, theta: float,
                               size: int = KERNEL_SIZE) -> np.ndarray:
    """Normalized anisotropic Gaussian on a ``size`` x ``size`` grid.

    ``lambda1`` is the standard deviation along the axis rotated ``theta``
    from the +x (column) direction, ``lambda2`` the one across it.
    """
    if lambda1 <= 0 or lambda2 <= 0:
        raise ValueError(f"kernel widths must be positive, got {lambda1}, {lambda2}")
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([lambda1 ** 2, lambda2 ** 2]) @ rot.T
    inv = np.linalg.inv(cov)
    r = size // 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    quad = inv[0, 0] * x * x + (inv[0, 1] + inv[1, 0]) * x * y + inv[1, 1] * y * y
    k = np.exp(-0.5 * quad)
    return k / k.sum()


def _check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")


def blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2-D correlation with mirror-reflected borders."""
    _check_image(img)
    kh, kw = kernel.shape
    if kh > img.shape[0] or kw > img.shape[1]:
        raise ValueError(f"kernel {kernel.shape} larger than image {img.shape[:2]}")
    out = np.empty_like(img, dtype=np.float64)
    for ch in range(img.shape[2]):
        # scipy's "mirror" is numpy's "reflect": the edge sample is not repeated
        ndimage.correlate(img[:, :, ch].astype(np.float64), kernel, output=out[:, :, ch], mode="mirror")
    return out


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bicubic interpolation weights with clamped edges."""
    centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(centers).astype(int)
    rows = np.arange(n_out)
    m = np.zeros((n_out, n_in))
    for t in range(-1, 3):
        idx = base + t
        np.add.at(m, (rows, np.clip(idx, 0, n_in - 1)), _cubic(centers - idx))
    return m


def bicubic_resample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extents must be >= 1, got {(out_h, out_w)}")
    if img.ndim not in (2, 3):
        raise ValueError(f"expected a 2-D or 3-D raster, got shape {img.shape}")
    mh = resample_matrix(img.shape[0], out_h)
    mw = resample_matrix(img.shape[1], out_w)
    if img.ndim == 2:
        return mh @ img @ mw.T
    return np.einsum("oh,hwc,pw->opc", mh, img, mw, optimize=True)


def blur_downsample(hr: np.ndarray, spec: DegradationSpec, kernel_size: int = KERNEL_SIZE) -> np.ndarray:
    """Noise-free part of the degradation, before clamping."""
    _check_image(hr)
    h, w = hr.shape[:2]
    s = spec.scale
    if h % s or w % s:
        raise ValueError(f"HR extents {(h, w)} not divisible by scale {s}; crop upstream")
    k = make_aniso_gaussian_kernel(spec.lambda1, spec.lambda2, spec.theta, kernel_size)
    return bicubic_resample(blur(hr, k), h // s, w // s)


def add_noise(lr_clean: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add N(0, (sigma/255)^2) per pixel and channel, then clamp to [0, 1]."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(lr_clean.shape) * (sigma / 255.0)
    return np.clip(lr_clean + noise, 0.0, 1.0)


def degrade(hr: np.ndarray, spec: DegradationSpec, seed: int, kernel_size: int = KERNEL_SIZE) -> LrHrPair:
    lr = add_noise(blur_downsample(hr, spec, kernel_size), spec.sigma, seed)
    return LrHrPair(hr=hr, lr=lr, spec=spec, seed=seed)


def sample_degradation(rng: np.random.Generator, config: SamplerConfig) -> DegradationSpec:
    if config.kernels:
        l1, l2, th = config.kernels[rng.integers(len(config.kernels))]
    else:
        l1 = rng.uniform(*config.lambda_range)
        l2 = rng.uniform(*config.lambda_range)
        th = rng.uniform(*config.theta_range)
    if config.noise_levels:
        sigma = config.noise_levels[rng.integers(len(config.noise_levels))]
    else:
        sigma = rng.uniform(*config.sigma_range)
    return DegradationSpec(float(l1), float(l2), float(th), float(sigma), config.scale)


def sample_other_sigma(rng: np.random.Generator, config: SamplerConfig, sigma: float,
                       exclusion: float = 1.0) -> float:
    """A noise level genuinely different from ``sigma``.

    Finite sets pick another member; continuous ranges draw uniformly from
    the range minus ``[sigma - exclusion, sigma + exclusion]``.
    """
    if config.noise_levels:
        others = [s for s in config.noise_levels if s != sigma]
        if not others:
            raise ValueError("noise level set has a single member; cannot draw a different one")
        return float(others[rng.integers(len(others))])
    lo, hi = config.sigma_range
    left = max(0.0, (sigma - exclusion) - lo)
    right = max(0.0, hi - (sigma + exclusion))
    if left + right <= 0:
        raise ValueError(f"noise range {config.sigma_range} leaves nothing outside sigma={sigma} +/- {exclusion}")
    u = rng.uniform(0.0, left + right)
    return float(lo + u if u < left else sigma + exclusion + (u - left))


def sample_other_kernel(rng: np.random.Generator, config: SamplerConfig,
                        kernel: tuple[float, float, float]) -> tuple[float, float, float]:
    if config.kernels:
        others = [k for k in config.kernels if tuple(k) != tuple(kernel)]
        if not others:
            raise ValueError("kernel set has a single member; cannot draw a different one")
        return tuple(float(v) for v in others[rng.integers(len(others))])
    while True:
        cand = (
            float(rng.uniform(*config.lambda_range)),
            float(rng.uniform(*config.lambda_range)),
            float(rng.uniform(*config.theta_range)),
        )
        if cand != tuple(kernel):
            return cand
