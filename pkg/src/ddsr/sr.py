"""Conditional SR network.

The blur embedding drives per-sample depthwise 3x3 filtering and a
channel-wise affine map; the noise embedding is broadcast over the feature
map, concatenated and fused by a 1x1 convolution. Blocks are residual, and the whole
network predicts a correction on top of a bicubic upsample of its input.
"""

from __future__ import annotations

import numpy as np

from ddsr import nn
from ddsr import tensor as T
from ddsr.config import TrainConfig
from ddsr.degradation import resample_matrix
from ddsr.tensor import Tensor


class CondBlock(nn.Module):
    def __init__(self, channels: int, embed_dim: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.embed_dim = embed_dim
        self.kernel_head = nn.Linear(embed_dim, channels * 9, rng)
        self.gamma_head = nn.Linear(embed_dim, channels, rng)
        self.beta_head = nn.Linear(embed_dim, channels, rng)
        self.fuse = nn.Conv2d(channels + embed_dim, channels, 1, rng)
        self.conv1 = nn.Conv2d(channels, channels, 3, rng)
        self.conv2 = nn.Conv2d(channels, channels, 3, rng)
        # start near neutral conditioning: delta kernel, unit gain, zero shift
        for head in (self.kernel_head, self.gamma_head, self.beta_head):
            head.weight.data *= 0.1
        delta = np.zeros((channels, 3, 3))
        delta[:, 1, 1] = 1.0
        self.kernel_head.bias.data = delta.reshape(-1).copy()
        self.gamma_head.bias.data = np.ones(channels)
        self.beta_head.bias.data = np.zeros(channels)
        # residual branch starts small so stacked blocks do not inflate activations
        self.conv2.weight.data *= 0.1

    def forward(self, feat: Tensor, d_k: Tensor, d_n: Tensor) -> Tensor:
        d_k, d_n = T.as_tensor(d_k), T.as_tensor(d_n)
        b, c, h, w = feat.shape
        for name, d in (("blur", d_k), ("noise", d_n)):
            if d.shape != (b, self.embed_dim):
                raise ValueError(f"{name} embedding must be ({b}, {self.embed_dim}), got {d.shape}")
        kernel = T.reshape(self.kernel_head(d_k), (b, c, 3, 3))
        x = T.depthwise_conv2d(feat, kernel)
        gamma = T.reshape(self.gamma_head(d_k), (b, c, 1, 1))
        beta = T.reshape(self.beta_head(d_k), (b, c, 1, 1))
        x = x * gamma + beta
        stretched = T.reshape(d_n, (b, self.embed_dim, 1, 1)) * np.ones((1, 1, h, w))
        x = self.fuse(T.concat([x, stretched], axis=1))
        x = self.conv2(T.leaky_relu(self.conv1(x), 0.1))
        return feat + x


class SrNetwork(nn.Module):
    def __init__(self, config: TrainConfig, rng: np.random.Generator):
        super().__init__()
        c = config.sr_channels
        self.scale = config.scale
        self.embed_dim = config.embed_dim
        self.head = nn.Conv2d(3, c, 3, rng)
        self.blocks = []
        for i in range(config.sr_blocks):
            blk = CondBlock(c, config.embed_dim, rng)
            setattr(self, f"block{i}", blk)
            self.blocks.append(blk)
        self.body_tail = nn.Conv2d(c, c, 3, rng)
        self.upsample = nn.Conv2d(c, c * self.scale * self.scale, 3, rng)
        self.tail = nn.Conv2d(c, 3, 3, rng)
        # small initial correction, so an untrained network sits near bicubic
        self.body_tail.weight.data *= 0.1
        self.tail.weight.data *= 0.01
        self.tail.bias.data[:] = 0.0

    def forward(self, lr: Tensor, d_k, d_n) -> Tensor:
        """NCHW LR batch -> NCHW SR batch (unclamped)."""
        lr = T.as_tensor(lr)
        h, w = lr.shape[2:]
        mh, mw = resample_matrix(h, h * self.scale), resample_matrix(w, w * self.scale)
        base = np.einsum("oh,bchw,pw->bcop", mh, lr.data, mw, optimize=True)
        feat = self.head(lr)
        x = feat
        for blk in self.blocks:
            x = blk(x, d_k, d_n)
        x = self.body_tail(x) + feat
        x = T.pixel_shuffle(self.upsample(x), self.scale)
        return self.tail(x) + base


MIN_LR_SIZE = 16


def to_nchw(images) -> Tensor:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_hwc(x) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return data.transpose(0, 2, 3, 1)


def super_resolve(lr: np.ndarray, d_k, d_n, net: SrNetwork) -> np.ndarray:
    """Inference on one (H, W, 3) LR image or an (B, H, W, 3) batch; clamps to [0, 1]."""
    single = np.asarray(lr).ndim == 3
    x = to_nchw(lr)
    if min(x.shape[2:]) < MIN_LR_SIZE:
        raise ValueError(f"LR extents {x.shape[2:]} below minimum {MIN_LR_SIZE}")
    dk = np.atleast_2d(d_k.data if isinstance(d_k, Tensor) else d_k)
    dn = np.atleast_2d(d_n.data if isinstance(d_n, Tensor) else d_n)
    with T.no_grad():
        out = np.clip(to_hwc(net(x, Tensor(dk), Tensor(dn))), 0.0, 1.0)
    return out[0] if single else out


def sr_restoration_loss(sr, hr) -> Tensor:
    sr, hr = T.as_tensor(sr), T.as_tensor(hr)
    if sr.shape != hr.shape:
        raise ValueError(f"SR shape {sr.shape} does not match HR shape {hr.shape}")
    return T.mean(T.tabs(sr - hr))
