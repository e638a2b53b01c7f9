"""Dual-branch degradation extractor with codebook purification and
queue-based contrastive training.

Each branch maps an LR image (through its Haar high-frequency stack) to a
raw unit embedding ``q``; purification re-expresses ``q`` as a softmax
attention over learned codebook rows, whose keys pass through the same
projector as the query.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ddsr import nn
from ddsr import tensor as T
from ddsr.config import TrainConfig
from ddsr.data import LrSource
from ddsr.degradation import (
    DegradationSpec,
    sample_degradation,
    sample_other_kernel,
    sample_other_sigma,
)
from ddsr.tensor import Tensor
from ddsr.wavelet import hf_tensor

BRANCHES = ("blur", "noise")


class Encoder(nn.Module):
    """Strided 3x3 conv stack, global average pool, dense head to ``out_dim``."""

    def __init__(self, in_ch: int, channels: list[int], strides: list[int], out_dim: int,
                 rng: np.random.Generator):
        super().__init__()
        self.convs = []
        prev = in_ch
        for i, (ch, st) in enumerate(zip(channels, strides)):
            conv = nn.Conv2d(prev, ch, 3, rng, stride=st, padding=1)
            setattr(self, f"conv{i}", conv)
            self.convs.append(conv)
            prev = ch
        self.head = nn.Linear(prev, out_dim, rng)
        total = int(np.prod(strides))
        # spatial extent must survive the strided stack with at least 2x2 left
        self.min_size = max(8, 2 * total)

    def forward(self, x: Tensor) -> Tensor:
        if min(x.shape[2:]) < self.min_size:
            raise ValueError(f"extractor input {x.shape[2:]} below minimum {self.min_size}x{self.min_size}")
        for conv in self.convs:
            x = T.leaky_relu(conv(x), 0.1)
        pooled = T.adaptive_avg_pool2d(x, 1)
        return self.head(T.reshape(pooled, pooled.shape[:2]))


class Projector(nn.Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, rng)
        self.fc2 = nn.Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.leaky_relu(self.fc1(x), 0.1))


class ExtractorBranch(nn.Module):
    def __init__(self, tag: str, in_ch: int, config: TrainConfig, rng: np.random.Generator):
        super().__init__()
        if tag not in BRANCHES:
            raise ValueError(f"branch tag must be one of {BRANCHES}, got {tag!r}")
        self.tag = tag
        n = config.embed_dim
        self.encoder = Encoder(in_ch, config.enc_channel_list, config.enc_stride_list, n, rng)
        self.projector = Projector(n, config.proj_hidden, rng)
        rows = rng.standard_normal((config.codebook_size, n)) / np.sqrt(n)
        if len(rows) > 1:
            # zero row mean: otherwise the shared mean dominates every purified output
            rows -= rows.mean(axis=0)
        self.codebook = T.parameter(rows)
        self.use_ncrp = config.use_ncrp

    def raw(self, x: Tensor) -> Tensor:
        return T.l2_normalize(self.projector(self.encoder(x)), axis=-1)

    def forward(self, x: Tensor) -> Tensor:
        q = self.raw(x)
        if not self.use_ncrp:
            return q
        return ncrp_purify(q, self.codebook, self.projector)


def ncrp_attention(q: Tensor, codebook: Tensor, projector=None) -> Tensor:
    """Softmax over dot products of ``q`` with normalized codebook keys."""
    q, codebook = T.as_tensor(q), T.as_tensor(codebook)
    if q.shape[-1] != codebook.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} does not match codebook width {codebook.shape[-1]}")
    keys = codebook if projector is None else projector(codebook)
    keys = T.l2_normalize(keys, axis=-1)
    return T.softmax(T.matmul(q, T.transpose(keys)), axis=-1)


def ncrp_purify(q: Tensor, codebook: Tensor, projector=None) -> Tensor:
    """Attention-weighted sum of raw codebook rows (a convex combination)."""
    return T.matmul(ncrp_attention(q, codebook, projector), T.as_tensor(codebook))


class DualExtractor(nn.Module):
    def __init__(self, config: TrainConfig, rng: np.random.Generator):
        super().__init__()
        self.use_wavelet = config.use_wavelet
        in_ch = 9 if config.use_wavelet else 3
        self.blur = ExtractorBranch("blur", in_ch, config, rng)
        self.noise = ExtractorBranch("noise", in_ch, config, rng)

    def branch(self, tag: str) -> ExtractorBranch:
        return self.blur if tag == "blur" else self.noise

    def prepare(self, images) -> Tensor:
        """(B, H, W, 3) arrays or an NCHW Tensor -> extractor input."""
        x = images if isinstance(images, Tensor) else Tensor(np.ascontiguousarray(
            np.asarray(images).transpose(0, 3, 1, 2)))
        return hf_tensor(x) if self.use_wavelet else x

    def forward(self, images) -> tuple[Tensor, Tensor]:
        x = self.prepare(images)
        return self.blur(x), self.noise(x)


def extract_raw(hf: np.ndarray, branch: ExtractorBranch) -> np.ndarray:
    """Raw unit embedding for a single (h, w, C) HF stack."""
    x = Tensor(np.ascontiguousarray(hf.transpose(2, 0, 1))[None])
    with T.no_grad():
        return branch.raw(x).data[0]


def momentum_update(online: nn.Module, key: nn.Module, m: float) -> None:
    for (_, po), (_, pk) in zip(online.named_parameters(), key.named_parameters()):
        pk.data *= m
        pk.data += (1.0 - m) * po.data


# ------------------------------------------------------------------ queues
class NegativeQueue:
    """FIFO of unit-norm key embeddings, oldest first.

    Each key may carry a degradation label (kernel triple for the blur
    branch, noise level for the noise branch) so the loss can skip negatives
    that share the query's class.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError(f"queue capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self.items = np.zeros((0, dim))
        self.labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.items)

    def push(self, keys: np.ndarray, labels: np.ndarray | None = None) -> "NegativeQueue":
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        if keys.shape[1] != self.dim:
            raise ValueError(f"key dim {keys.shape[1]} does not match queue dim {self.dim}")
        norms = np.linalg.norm(keys, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("queue keys must be unit-normalized")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.float64).reshape(len(keys), -1)
            if len(self.items) and self.labels is None:
                raise ValueError("cannot push labelled keys into an unlabelled queue")
            self.labels = labels if self.labels is None else np.concatenate([self.labels, labels])
            self.labels = self.labels[-self.capacity:]
        elif self.labels is not None:
            raise ValueError("this queue holds labelled keys; labels are required")
        self.items = np.concatenate([self.items, keys])[-self.capacity:]
        return self


def queue_push(queue: NegativeQueue, keys: np.ndarray, labels: np.ndarray | None = None) -> NegativeQueue:
    return queue.push(keys, labels)


MASKED_LOGIT = -1e9


def infonce_loss(d_query, d_pos, negatives, tau: float, query_labels=None) -> Tensor:
    """Batch-mean InfoNCE with the positive included in the denominator.

    ``negatives`` is a (Q, N) array or a :class:`NegativeQueue`; both query
    and positive are unit-normalized before the dot products. With
    ``query_labels`` and a labelled queue, negatives whose label equals the
    query's are left out of that query's denominator.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    neg_labels = None
    if isinstance(negatives, NegativeQueue):
        neg, neg_labels = negatives.items, negatives.labels
    else:
        neg = np.asarray(negatives, dtype=np.float64)
    if neg.ndim != 2 or len(neg) == 0:
        raise ValueError("negative queue is empty; warm it up before computing the loss")
    q = T.l2_normalize(T.as_tensor(d_query), axis=-1)
    k = T.l2_normalize(T.as_tensor(d_pos), axis=-1)
    pos = T.tsum(q * k, axis=1, keepdims=True)
    negs = T.matmul(q, Tensor(neg.T))
    logits = T.concat([pos, negs], axis=1) * (1.0 / tau)
    if query_labels is not None and neg_labels is not None:
        ql = np.asarray(query_labels, dtype=np.float64).reshape(len(q.data), -1)
        same = np.all(ql[:, None, :] == neg_labels[None, :, :], axis=2)
        mask = np.concatenate([np.zeros((len(ql), 1)), np.where(same, MASKED_LOGIT, 0.0)], axis=1)
        logits = logits + Tensor(mask)
    return -T.mean(T.log_softmax(logits, axis=1)[:, 0])


# --------------------------------------------------------- contrast batches
@dataclass
class ContrastBatch:
    query: np.ndarray
    blur_pos: np.ndarray
    noise_pos: np.ndarray
    query_specs: list[DegradationSpec] = field(default_factory=list)
    blur_specs: list[DegradationSpec] = field(default_factory=list)
    noise_specs: list[DegradationSpec] = field(default_factory=list)
    sources: list[tuple[int, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.query)

    def labels(self, tag: str, role: str = "query") -> np.ndarray:
        """Class labels: kernel triples for ``blur``, noise levels for ``noise``."""
        specs = {"query": self.query_specs, "blur": self.blur_specs, "noise": self.noise_specs}[role]
        return spec_labels(specs, tag)


def spec_labels(specs: list[DegradationSpec], tag: str) -> np.ndarray:
    if tag == "blur":
        return np.array([s.kernel_params for s in specs], dtype=np.float64).reshape(len(specs), 3)
    return np.array([[s.sigma] for s in specs], dtype=np.float64).reshape(len(specs), 1)


def _other_index(rng: np.random.Generator, n: int, exclude: int) -> int:
    j = int(rng.integers(n - 1))
    return j + 1 if j >= exclude else j


def build_contrast_batch(source: LrSource, rng: np.random.Generator, config: TrainConfig,
                         batch_size: int | None = None) -> ContrastBatch:
    """Query / blur-positive / noise-positive triples.

    With constraints on, the blur positive shares the query's kernel under a
    different noise level and the noise positive shares its noise level under
    a different kernel. With constraints off, both positives reuse the
    query's full degradation. Positives always come from other images.
    """
    n_img = len(source.pool)
    if n_img < 2:
        raise ValueError("contrastive batches need a pool of at least 2 images")
    b = batch_size or config.batch_size
    sampler = config.sampler()
    size = config.patch_size
    out = ContrastBatch(np.empty((b, size, size, 3)), np.empty((b, size, size, 3)), np.empty((b, size, size, 3)))
    for m in range(b):
        spec = sample_degradation(rng, sampler)
        if config.use_constraints:
            bspec = DegradationSpec(*spec.kernel_params, sample_other_sigma(rng, sampler, spec.sigma), spec.scale)
            nspec = DegradationSpec(*sample_other_kernel(rng, sampler, spec.kernel_params), spec.sigma, spec.scale)
        else:
            bspec = nspec = spec
        i = int(rng.integers(n_img))
        j = _other_index(rng, n_img, i)
        k = _other_index(rng, n_img, i)
        out.query[m] = source.crop(rng, i, spec, size)
        out.blur_pos[m] = source.crop(rng, j, bspec, size)
        out.noise_pos[m] = source.crop(rng, k, nspec, size)
        out.query_specs.append(spec)
        out.blur_specs.append(bspec)
        out.noise_specs.append(nspec)
        out.sources.append((i, j, k))
    return out


# ------------------------------------------------------------------ training
class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class ContrastState:
    """Online extractor, its momentum copy, and one queue per branch."""

    online: DualExtractor
    key: DualExtractor
    queues: dict[str, NegativeQueue]
    tau: float
    momentum: float
    exclude_same_class: bool = True

    @classmethod
    def create(cls, config: TrainConfig, rng: np.random.Generator) -> "ContrastState":
        online = DualExtractor(config, rng)
        key = copy.deepcopy(online)
        for p in key.parameters():
            p.requires_grad = False
        queues = {tag: NegativeQueue(config.queue_size, config.embed_dim) for tag in BRANCHES}
        return cls(online, key, queues, config.tau, config.momentum, config.exclude_same_class)

    def key_embeddings(self, images: np.ndarray, tag: str) -> np.ndarray:
        with T.no_grad():
            x = self.key.prepare(images)
            d = self.key.branch(tag)(x)
            return T.l2_normalize(d, axis=-1).data

    def warm_up(self, batch: ContrastBatch) -> None:
        self.queues["blur"].push(self.key_embeddings(batch.blur_pos, "blur"), batch.labels("blur", "blur"))
        self.queues["noise"].push(self.key_embeddings(batch.noise_pos, "noise"), batch.labels("noise", "noise"))


def contrastive_losses(batch: ContrastBatch, state: ContrastState):
    """Both InfoNCE terms (as graph tensors) and the keys to enqueue afterwards."""
    x = state.online.prepare(batch.query)
    d_blur = state.online.blur(x)
    d_noise = state.online.noise(x)
    k_blur = state.key_embeddings(batch.blur_pos, "blur")
    k_noise = state.key_embeddings(batch.noise_pos, "noise")
    mask = state.exclude_same_class
    l_blur = infonce_loss(d_blur, k_blur, state.queues["blur"], state.tau,
                          batch.labels("blur") if mask else None)
    l_noise = infonce_loss(d_noise, k_noise, state.queues["noise"], state.tau,
                           batch.labels("noise") if mask else None)
    keys = {"blur": (k_blur, batch.labels("blur", "blur")), "noise": (k_noise, batch.labels("noise", "noise"))}
    return l_blur, l_noise, keys


def finish_contrast_step(state: ContrastState, keys: dict) -> None:
    """Momentum-update the key encoder, then enqueue the step's (keys, labels)."""
    momentum_update(state.online, state.key, state.momentum)
    for tag in BRANCHES:
        state.queues[tag].push(*keys[tag])


def train_extractor_step(batch: ContrastBatch, state: ContrastState, optimizer) -> tuple[float, float]:
    l_blur, l_noise, keys = contrastive_losses(batch, state)
    total = l_blur + l_noise
    if not np.isfinite(total.data):
        raise NonFiniteLoss(f"non-finite contrastive loss: blur={l_blur.item()} noise={l_noise.item()}")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    finish_contrast_step(state, keys)
    return l_blur.item(), l_noise.item()


# ------------------------------------------------------------- persistence
def extractor_state(state: ContrastState) -> dict[str, np.ndarray]:
    params = {}
    for name, p in state.online.named_parameters():
        params["online." + name] = p.data
    for name, p in state.key.named_parameters():
        params["key." + name] = p.data
    for tag in BRANCHES:
        params["queue." + tag] = state.queues[tag].items
        if state.queues[tag].labels is not None:
            params["queue." + tag + ".labels"] = state.queues[tag].labels
    return params


def restore_extractor(config: TrainConfig, params: dict[str, np.ndarray]) -> ContrastState:
    state = ContrastState.create(config, np.random.default_rng(0))
    state.online.load_state_dict(params, prefix="online.")
    state.key.load_state_dict(params, prefix="key.")
    for tag in BRANCHES:
        items = params.get("queue." + tag)
        if items is not None and items.size:
            queue = state.queues[tag]
            queue.items = np.asarray(items).reshape(-1, config.embed_dim).copy()
            labels = params.get("queue." + tag + ".labels")
            if labels is not None:
                queue.labels = np.asarray(labels).reshape(len(queue.items), -1).copy()
    return state
