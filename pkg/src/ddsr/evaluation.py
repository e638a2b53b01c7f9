"""Kernel x noise benchmark grids, oracle-conditioned upper bounds, and
embedding export / separability scoring."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ddsr import tensor as T
from ddsr.config import TrainConfig
from ddsr.data import crop_to_multiple, load_image_dir, synthetic_pool
from ddsr.degradation import DegradationSpec, bicubic_resample, degrade
from ddsr.extractor import DualExtractor
from ddsr.metrics import psnr_y, ssim_y
from ddsr.sr import SrNetwork, super_resolve
from ddsr.training import load_extractor, load_sr, oracle_embeddings

Restorer = Callable[[np.ndarray, DegradationSpec], np.ndarray]

EVAL_SEED_OFFSET = 7919


@dataclass
class BenchmarkGrid:
    kernels: list[tuple[float, float, float]]
    noise_levels: list[float]
    dataset_id: str
    psnr: np.ndarray = None
    ssim: np.ndarray = None
    counts: np.ndarray = None
    failures: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = (len(self.kernels), len(self.noise_levels))
        if self.psnr is None:
            self.psnr = np.full(shape, np.nan)
            self.ssim = np.full(shape, np.nan)
            self.counts = np.zeros(shape, dtype=int)

    def status(self, ki: int, ni: int) -> str:
        if (ki, ni) not in self.failures:
            return "ok"
        return "failed" if self.counts[ki, ni] == 0 else "partial"

    @property
    def mean_psnr(self) -> float:
        return float(np.nanmean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.nanmean(self.ssim))

    @staticmethod
    def kernel_label(k) -> str:
        return f"{k[0]:.2f}/{k[1]:.2f}/{math.degrees(k[2]):.0f}"

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "lambda1", "lambda2", "theta", "sigma", "psnr", "ssim", "images", "status"])
            for (ki, k), (ni, n) in itertools.product(enumerate(self.kernels), enumerate(self.noise_levels)):
                w.writerow([self.dataset_id, repr(k[0]), repr(k[1]), repr(k[2]), repr(n),
                            repr(float(self.psnr[ki, ni])), repr(float(self.ssim[ki, ni])),
                            int(self.counts[ki, ni]), self.status(ki, ni)])
        return path

    def to_table(self) -> str:
        labels = [self.kernel_label(k) for k in self.kernels]
        width = max(15, *(len(s) + 2 for s in labels))
        lines = ["N".rjust(4) + "".join(s.rjust(width) for s in labels)]
        for ni, n in enumerate(self.noise_levels):
            cells = []
            for ki in range(len(self.kernels)):
                if self.counts[ki, ni] == 0:
                    cells.append("failed".rjust(width))
                else:
                    mark = "*" if self.status(ki, ni) == "partial" else ""
                    cells.append(f"{self.psnr[ki, ni]:.2f}/{self.ssim[ki, ni]:.4f}{mark}".rjust(width))
            lines.append(f"{n:4g}" + "".join(cells))
        return "\n".join(lines) + "\n"


def cell_seed(seed: int, ki: int, ni: int, image: int) -> int:
    return int(np.random.SeedSequence([seed, ki, ni, image]).generate_state(1)[0])


def evaluate_grid(restore: Restorer, images: list[np.ndarray], kernels, noise_levels, scale: int,
                  seed: int, dataset_id: str = "synthetic", kernel_size: int = 21,
                  spec_map: Callable[[int, int], DegradationSpec] | None = None) -> BenchmarkGrid:
    """Degrade every image per cell with a fixed seed, restore, average Y metrics.

    ``spec_map(ki, ni)``, when given, overrides the spec handed to the
    restorer (the degradation itself always uses the cell's true spec).
    """
    grid = BenchmarkGrid(list(kernels), list(noise_levels), dataset_id)
    hrs = [crop_to_multiple(im, scale) for im in images]
    for (ki, k), (ni, n) in itertools.product(enumerate(grid.kernels), enumerate(grid.noise_levels)):
        spec = DegradationSpec(k[0], k[1], k[2], n, scale)
        shown = spec_map(ki, ni) if spec_map else spec
        ps, ss = [], []
        for ii, hr in enumerate(hrs):
            try:
                lr = degrade(hr, spec, cell_seed(seed, ki, ni, ii), kernel_size).lr
                sr = restore(lr, shown)
                ps.append(psnr_y(sr, hr, crop=scale))
                ss.append(ssim_y(sr, hr, crop=scale))
            except Exception as exc:  # recorded per image; the cell is marked partial
                grid.failures.setdefault((ki, ni), []).append(f"image {ii}: {exc}")
        grid.counts[ki, ni] = len(ps)
        if ps:
            grid.psnr[ki, ni] = float(np.mean(ps))
            grid.ssim[ki, ni] = float(np.mean(ss))
    return grid


# ---------------------------------------------------------------- restorers
def bicubic_restorer(scale: int) -> Restorer:
    def restore(lr, spec):
        h, w = lr.shape[:2]
        return np.clip(bicubic_resample(lr, h * scale, w * scale), 0.0, 1.0)
    return restore


def predicted_restorer(net: SrNetwork, extractor: DualExtractor) -> Restorer:
    def restore(lr, spec):
        with T.no_grad():
            dk, dn = extractor(lr[None])
        return super_resolve(lr, dk, dn, net)
    return restore


def oracle_restorer(net: SrNetwork, embed_dim: int) -> Restorer:
    def restore(lr, spec):
        dk, dn = oracle_embeddings([spec], embed_dim)
        return super_resolve(lr, dk, dn, net)
    return restore


# --------------------------------------------------------------- harnesses
def eval_images(config: TrainConfig, dataset_dir=None) -> tuple[str, list[np.ndarray]]:
    if dataset_dir:
        return Path(dataset_dir).name, load_image_dir(dataset_dir)[1]
    return "synthetic", synthetic_pool(config.eval_count, config.eval_size, config.seed + EVAL_SEED_OFFSET)


def load_restorer(model_ckpt, extractor_ckpt=None, conditioning: str | None = None):
    """Build a restorer from checkpoints; ``"bicubic"`` selects the baseline."""
    if str(model_ckpt) == "bicubic":
        return None, None
    net, config = load_sr(model_ckpt)
    mode = conditioning or config.conditioning
    if mode == "oracle":
        return oracle_restorer(net, config.embed_dim), config
    state, _ = load_extractor(extractor_ckpt or model_ckpt)
    return predicted_restorer(net, state.online), config


def run_benchmark(model_ckpt, extractor_ckpt, config: TrainConfig, dataset_dir=None) -> BenchmarkGrid:
    restore, _ = load_restorer(model_ckpt, extractor_ckpt, conditioning="predicted")
    if restore is None:
        restore = bicubic_restorer(config.scale)
    dataset_id, images = eval_images(config, dataset_dir)
    return evaluate_grid(restore, images, config.grid_kernel_list, config.grid_noise_list,
                         config.scale, config.seed, dataset_id, config.kernel_size)


def shifted_spec_map(kernels, noise_levels, scale: int):
    """Hand each cell the spec of a different cell (next kernel, next noise)."""
    if len(kernels) * len(noise_levels) < 2:
        raise ValueError("shuffled conditioning needs at least two grid cells")

    def spec_map(ki, ni):
        kj = (ki + 1) % len(kernels)
        nj = (ni + 1) % len(noise_levels)
        k = kernels[kj]
        return DegradationSpec(k[0], k[1], k[2], noise_levels[nj], scale)
    return spec_map


def run_upper_bound(model_ckpt, config: TrainConfig, dataset_dir=None, shuffle: bool = False) -> BenchmarkGrid:
    net, model_config = load_sr(model_ckpt)
    restore = oracle_restorer(net, model_config.embed_dim)
    dataset_id, images = eval_images(config, dataset_dir)
    kernels, noise = config.grid_kernel_list, config.grid_noise_list
    spec_map = shifted_spec_map(kernels, noise, config.scale) if shuffle else None
    return evaluate_grid(restore, images, kernels, noise, config.scale, config.seed,
                         dataset_id, config.kernel_size, spec_map)


# -------------------------------------------------------------- embeddings
EMBED_META = ("image_id", "branch", "lambda1", "lambda2", "theta", "sigma")


def embed_dataset(extractor: DualExtractor, images: list[np.ndarray], kernels, noise_levels,
                  scale: int, seed: int, per_class: int = 1, kernel_size: int = 21) -> list[dict]:
    """Embedding rows for separability analysis.

    Blur rows: every kernel class, each sample with a random noise level.
    Noise rows: every noise class, each sample with a random kernel.
    """
    rng = np.random.default_rng([seed, 17])
    hrs = [crop_to_multiple(im, scale) for im in images]
    rows = []

    def emit(image_id, branch, spec):
        lr = degrade(hrs[image_id], spec, int(rng.integers(2 ** 31)), kernel_size).lr
        with T.no_grad():
            dk, dn = extractor(lr[None])
        vec = (dk if branch == "blur" else dn).data[0]
        rows.append({"image_id": image_id, "branch": branch, "lambda1": spec.lambda1, "lambda2": spec.lambda2,
                     "theta": spec.theta, "sigma": spec.sigma, "embedding": vec})

    for _ in range(per_class):
        for ii in range(len(hrs)):
            for k in kernels:
                n = noise_levels[rng.integers(len(noise_levels))]
                emit(ii, "blur", DegradationSpec(k[0], k[1], k[2], n, scale))
            for n in noise_levels:
                k = kernels[rng.integers(len(kernels))]
                emit(ii, "noise", DegradationSpec(k[0], k[1], k[2], n, scale))
    return rows


def write_embedding_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = len(rows[0]["embedding"]) if rows else 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(EMBED_META) + [f"e_{i}" for i in range(dim)])
        for r in rows:
            w.writerow([r["image_id"], r["branch"]] + [repr(float(r[k])) for k in EMBED_META[2:]]
                       + [repr(float(v)) for v in r["embedding"]])
    return path


def read_embedding_csv(path) -> list[dict]:
    rows = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            emb = [float(v) for k, v in rec.items() if k.startswith("e_")]
            rows.append({"image_id": int(rec["image_id"]), "branch": rec["branch"],
                         **{k: float(rec[k]) for k in EMBED_META[2:]}, "embedding": np.array(emb)})
    return rows


@dataclass
class SeparabilityReport:
    branch: str
    within: float
    between: float
    classes: int
    samples: int

    @property
    def margin(self) -> float:
        return self.within - self.between

    def to_text(self) -> str:
        return (f"branch={self.branch} classes={self.classes} samples={self.samples} "
                f"within={self.within:.4f} between={self.between:.4f} margin={self.margin:.4f}")


def class_separability(embeddings: np.ndarray, labels, branch: str = "") -> SeparabilityReport:
    """Mean pairwise cosine similarity within vs between classes."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = list(labels)
    uniq = sorted(set(labels))
    counts = {u: labels.count(u) for u in uniq}
    if len(uniq) < 2 or min(counts.values()) < 5:
        raise ValueError(f"separability needs >= 2 classes with >= 5 samples each, got {counts}")
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    u = x / norms
    sim = np.clip(u @ u.T, -1.0, 1.0)
    lab = np.array([uniq.index(v) for v in labels])
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(lab), dtype=bool)
    within = float(sim[same & off].mean())
    between = float(sim[~same].mean())
    return SeparabilityReport(branch, within, between, len(uniq), len(lab))


def separability_score(source) -> dict[str, SeparabilityReport]:
    """Per-branch reports from an embedding CSV path or row list."""
    rows = read_embedding_csv(source) if isinstance(source, (str, Path)) else source
    reports = {}
    for branch in ("blur", "noise"):
        sel = [r for r in rows if r["branch"] == branch]
        if not sel:
            continue
        if branch == "blur":
            labels = [(round(r["lambda1"], 9), round(r["lambda2"], 9), round(r["theta"], 9)) for r in sel]
        else:
            labels = [round(r["sigma"], 9) for r in sel]
        reports[branch] = class_separability(np.stack([r["embedding"] for r in sel]), labels, branch)
    if not reports:
        raise ValueError("no blur or noise rows to score")
    return reports
