"""HR image pools, PNG I/O and procedural test imagery."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from ddsr.degradation import DegradationSpec, blur_downsample, add_noise


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png(path, img: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    u8 = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(u8, mode="RGB").save(path)
    return path


def load_image_dir(directory) -> tuple[list[str], list[np.ndarray]]:
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG images in {directory}")
    return [p.stem for p in paths], [read_png(p) for p in paths]


def synthetic_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """A random RGB field with a 1/f amplitude spectrum.

    Natural photographs share roughly this power law. Every image drawn
    here has the same spectral statistics, so variation in high-frequency
    content between two degraded crops comes from the degradation rather
    than from scene content.
    """
    f = np.fft.fftfreq(size)
    radius = np.hypot(f[:, None], f[None, :])
    radius[0, 0] = 1.0
    coeffs = rng.standard_normal((size, size, 3)) + 1j * rng.standard_normal((size, size, 3))
    field = np.fft.ifft2(coeffs / radius[:, :, None], axes=(0, 1)).real
    field = (field - field.mean()) / field.std() * 0.18 + 0.5
    return np.clip(field, 0.0, 1.0)


def synthetic_pool(count: int, size: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, size) for _ in range(count)]


def load_pool(config, seed_offset: int = 0) -> list[np.ndarray]:
    """Training HR images: ``config.hr_dir`` when set, else a synthetic pool."""
    if config.hr_dir:
        return load_image_dir(config.hr_dir)[1]
    return synthetic_pool(config.synthetic_count, config.synthetic_size, config.seed + seed_offset)


def crop_to_multiple(img: np.ndarray, s: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % s, : w - w % s]


def random_crop(rng: np.random.Generator, img: np.ndarray, size: int, align: int = 1) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {img.shape[:2]} smaller than crop {size}")
    y = rng.integers(0, (h - size) // align + 1) * align
    x = rng.integers(0, (w - size) // align + 1) * align
    return img[y:y + size, x:x + size]


class LrSource:
    """Produces LR crops of pool images under given degradations.

    For finite kernel sets (toy worlds) whole images are blurred and
    downsampled once per (image, kernel) and crops are cut from the cached
    LR; otherwise the HR crop is degraded directly. Noise is always drawn
    per crop from its own seed.
    """

    def __init__(self, pool: list[np.ndarray], scale: int, kernel_size: int, cache: bool):
        self.pool = [crop_to_multiple(im, scale) for im in pool]
        self.scale = scale
        self.kernel_size = kernel_size
        self.cache = cache
        self._clean: dict[tuple, np.ndarray] = {}

    def _clean_lr(self, idx: int, spec: DegradationSpec) -> np.ndarray:
        key = (idx, spec.kernel_params)
        if key not in self._clean:
            self._clean[key] = blur_downsample(self.pool[idx], spec, self.kernel_size)
        return self._clean[key]

    def crop(self, rng: np.random.Generator, idx: int, spec: DegradationSpec, lr_size: int,
             with_hr: bool = False):
        s = self.scale
        noise_seed = int(rng.integers(2 ** 31))
        if self.cache:
            clean = self._clean_lr(idx, spec)
            h, w = clean.shape[:2]
            if h < lr_size or w < lr_size:
                raise ValueError(f"LR image {clean.shape[:2]} smaller than crop {lr_size}")
            y = int(rng.integers(0, h - lr_size + 1))
            x = int(rng.integers(0, w - lr_size + 1))
            lr = add_noise(clean[y:y + lr_size, x:x + lr_size], spec.sigma, noise_seed)
            hr = self.pool[idx][y * s:(y + lr_size) * s, x * s:(x + lr_size) * s]
        else:
            hr = random_crop(rng, self.pool[idx], lr_size * s, align=s)
            lr = add_noise(blur_downsample(hr, spec, self.kernel_size), spec.sigma, noise_seed)
        return (lr, hr) if with_hr else lr
