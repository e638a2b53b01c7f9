"""Single-level orthonormal Haar analysis.

For each 2x2 block ``[[a, b], [c, d]]``::

    LL = (a + b + c + d) / 2     LH = (a + b - c - d) / 2   (row difference)
    HL = (a - b + c - d) / 2     HH = (a - b - c + d) / 2

HL responds to vertical edges, LH to horizontal ones. The high-frequency
stack orders bands as (LH, HL, HH) per color channel.
"""

from __future__ import annotations

import numpy as np

from ddsr import tensor as T
from ddsr.tensor import Tensor


def _bands(a, b, c, d):
    # works for numpy arrays and Tensors alike
    ll = (a + b + c + d) * 0.5
    lh = (a + b - c - d) * 0.5
    hl = (a - b + c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return ll, lh, hl, hh


def pad_to_even(img: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad one trailing row/column when an extent is odd."""
    ph, pw = img.shape[0] % 2, img.shape[1] % 2
    if ph or pw:
        widths = [(0, ph), (0, pw)] + [(0, 0)] * (img.ndim - 2)
        img = np.pad(img, widths, mode="reflect")
    return img, (ph, pw)


def haar_decompose(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(LL, HF)`` for an (H, W, C) raster.

    LL is (H/2, W/2, C); HF is (H/2, W/2, 3C) holding LH, HL, HH per channel.
    Odd extents are reflect-padded by one first.
    """
    if img.size == 0:
        raise ValueError("cannot decompose an empty image")
    if img.ndim == 2:
        img = img[:, :, None]
    img, _ = pad_to_even(np.asarray(img, dtype=np.float64))
    ll, lh, hl, hh = _bands(img[0::2, 0::2], img[0::2, 1::2], img[1::2, 0::2], img[1::2, 1::2])
    h, w, ch = ll.shape
    hf = np.stack([lh, hl, hh], axis=3).reshape(h, w, 3 * ch)
    return ll, hf


def haar_reconstruct(ll: np.ndarray, hf: np.ndarray) -> np.ndarray:
    h, w, ch = ll.shape
    lh, hl, hh = np.moveaxis(hf.reshape(h, w, ch, 3), 3, 0)
    out = np.empty((2 * h, 2 * w, ch))
    out[0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[0::2, 1::2] = (ll + lh - hl - hh) * 0.5
    out[1::2, 0::2] = (ll - lh + hl - hh) * 0.5
    out[1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out


def hf_input(lr: np.ndarray) -> np.ndarray:
    return haar_decompose(lr)[1]


def hf_tensor(x: Tensor) -> Tensor:
    """Differentiable HF stack for an NCHW batch with even extents.

    Returns (B, 3C, H/2, W/2) in the same band order as :func:`hf_input`.
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"hf_tensor needs even extents, got {(h, w)}")
    _, lh, hl, hh = _bands(x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])
    stacked = T.concat([T.reshape(t, (b, c, 1, h // 2, w // 2)) for t in (lh, hl, hh)], axis=2)
    return T.reshape(stacked, (b, 3 * c, h // 2, w // 2))
