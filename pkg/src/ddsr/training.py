"""Three-stage schedule: contrastive extractor training, SR training against
a frozen extractor, then joint fine-tuning on the total objective."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from ddsr import tensor as T
from ddsr.checkpoint import load_checkpoint, save_checkpoint
from ddsr.config import TrainConfig
from ddsr.data import LrSource, load_pool
from ddsr.degradation import DegradationSpec, sample_degradation
from ddsr.extractor import (
    ContrastState,
    DualExtractor,
    build_contrast_batch,
    contrastive_losses,
    extractor_state,
    finish_contrast_step,
    restore_extractor,
    train_extractor_step,
)
from ddsr.optim import Adam
from ddsr.sr import SrNetwork, sr_restoration_loss, to_nchw
from ddsr.tensor import Tensor

logger = logging.getLogger(__name__)

LOSS_FIELDS = ("cl_blur", "cl_noise", "sr", "reg_blur", "reg_noise")


class TrainingDiverged(RuntimeError):
    pass


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Pin BLAS to one thread so repeated runs are bit-identical."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


@contextlib.contextmanager
def frozen(module):
    """Temporarily stop gradients from reaching ``module``'s parameters."""
    params = module.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


# -------------------------------------------------------------------- losses
@dataclass
class LossRecord:
    cl_blur: float | Tensor = 0.0
    cl_noise: float | Tensor = 0.0
    sr: float | Tensor = 0.0
    reg_blur: float | Tensor = 0.0
    reg_noise: float | Tensor = 0.0

    def values(self) -> dict[str, float]:
        return {k: float(v.item() if isinstance(v, Tensor) else v) for k, v in
                ((f, getattr(self, f)) for f in LOSS_FIELDS)}


def total_loss(losses: LossRecord, lambda_noise: float = 1000.0, lambda_blur: float = 10.0):
    """L_CL_noise + L_CL_blur + L_SR + lambda_noise * L_Reg_noise + lambda_blur * L_Reg_blur."""
    for name, value in losses.values().items():
        if not math.isfinite(value):
            raise ValueError(f"loss component {name} is not finite ({value})")
    return (losses.cl_noise + losses.cl_blur + losses.sr
            + losses.reg_noise * lambda_noise + losses.reg_blur * lambda_blur)


def regularization_loss(sr, hr, extractor: DualExtractor) -> tuple[Tensor, Tensor]:
    """(L_Reg_noise, L_Reg_blur): L1 gap between purified embeddings of SR and HR.

    ``sr`` and ``hr`` are NCHW. HR embeddings are targets (no gradient);
    gradient flows through the SR side only, never into extractor weights.
    """
    sr, hr = T.as_tensor(sr), T.as_tensor(hr)
    if sr.shape != hr.shape:
        raise ValueError(f"SR shape {sr.shape} does not match HR shape {hr.shape}")
    with frozen(extractor):
        with T.no_grad():
            hr_blur, hr_noise = extractor(hr.detach())
        sr_blur, sr_noise = extractor(sr)
    reg_noise = T.mean(T.tabs(sr_noise - hr_noise.data))
    reg_blur = T.mean(T.tabs(sr_blur - hr_blur.data))
    return reg_noise, reg_blur


# --------------------------------------------------------- oracle encodings
_ORACLE_SEED = 20240101


def oracle_embeddings(specs: list[DegradationSpec], embed_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed linear maps of ground-truth parameters to embedding space.

    Blur features are (lambda1/4, lambda2/4, cos 2theta, sin 2theta) so the
    encoding respects the pi-periodicity of theta; noise feature is sigma/25.
    """
    rng = np.random.default_rng(_ORACLE_SEED)
    wk = rng.standard_normal((4, embed_dim)) / np.sqrt(4 * embed_dim)
    wn = rng.standard_normal((1, embed_dim)) / np.sqrt(embed_dim)
    fk = np.array([[s.lambda1 / 4, s.lambda2 / 4, math.cos(2 * s.theta), math.sin(2 * s.theta)] for s in specs])
    fn = np.array([[s.sigma / 25.0] for s in specs])
    return fk @ wk, fn @ wn


# ------------------------------------------------------------------ manifest
class RunManifest:
    """Append-only per-step loss CSV plus a run summary.

    ``manifest.csv`` holds only deterministic content; wall-clock time goes
    to ``timing.txt`` so repeated runs can be compared byte for byte.
    """

    COLUMNS = ("stage", "step") + LOSS_FIELDS + ("total",)

    def __init__(self, out_dir, config: TrainConfig):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.path = self.out_dir / "manifest.csv"
        self.records: list[dict] = []
        self.checkpoints: list[tuple[str, Path]] = []
        self._start = time.perf_counter()
        self._fh = self.path.open("w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.COLUMNS)
        self._fh.flush()
        (self.out_dir / "config.txt").write_text(config.to_text())

    def log(self, stage: int, step: int, losses: LossRecord, total: float) -> dict:
        vals = losses.values()
        if self.records:
            last = self.records[-1]
            if (stage, step) <= (last["stage"], last["step"]):
                raise ValueError(f"manifest steps must increase, got stage {stage} step {step} after "
                                 f"stage {last['stage']} step {last['step']}")
        row = {"stage": stage, "step": step, **vals, "total": float(total)}
        self.records.append(row)
        self._writer.writerow([stage, step] + [repr(vals[k]) for k in LOSS_FIELDS] + [repr(float(total))])
        self._fh.flush()
        return row

    def add_checkpoint(self, stage: str, path) -> None:
        self.checkpoints.append((stage, Path(path)))

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.close()
        lines = [f"{stage} = {p.name}" for stage, p in self.checkpoints]
        (self.out_dir / "run.txt").write_text("\n".join(["[checkpoints]"] + lines) + "\n")
        (self.out_dir / "timing.txt").write_text(f"wall_clock_seconds = {time.perf_counter() - self._start:.3f}\n")

    def series(self, stage: int, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records if r["stage"] == stage])

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _DivergenceGuard:
    def __init__(self, patience: int):
        self.patience = patience
        self.count = 0

    def check(self, loss: float, queue_len: int, step: int) -> None:
        limit = 2.0 * math.log(queue_len + 1)
        self.count = self.count + 1 if loss > limit else 0
        if self.patience > 0 and self.count >= self.patience:
            raise TrainingDiverged(
                f"contrastive loss {loss:.4f} above {limit:.4f} for {self.count} steps (step {step})"
            )


# ------------------------------------------------------------------ helpers
def _rngs(config: TrainConfig, stage: int):
    init = np.random.default_rng([config.seed, stage, 1])
    data = np.random.default_rng([config.seed, stage, 2])
    return init, data


def _source(config: TrainConfig, pool=None) -> LrSource:
    pool = load_pool(config) if pool is None else pool
    return LrSource(pool, config.scale, config.kernel_size, cache=bool(config.toy_kernels))


def sample_sr_batch(source: LrSource, rng: np.random.Generator, config: TrainConfig):
    sampler = config.sampler()
    lrs, hrs, specs = [], [], []
    for _ in range(config.batch_size):
        spec = sample_degradation(rng, sampler)
        lr, hr = source.crop(rng, int(rng.integers(len(source.pool))), spec, config.patch_size, with_hr=True)
        lrs.append(lr)
        hrs.append(hr)
        specs.append(spec)
    return np.stack(lrs), np.stack(hrs), specs


def conditioning(config: TrainConfig, extractor: DualExtractor | None, lr_images, specs):
    """Embeddings fed to the SR network: predicted by the extractor or oracle."""
    if config.conditioning == "oracle":
        dk, dn = oracle_embeddings(specs, config.embed_dim)
        return Tensor(dk), Tensor(dn)
    return extractor(lr_images)


def params_digest(module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _meta(config: TrainConfig, kind: str) -> dict[str, str]:
    return {"kind": kind, **config.to_meta()}


def config_from_meta(meta: dict[str, str]) -> TrainConfig:
    return TrainConfig.from_mapping({k: v for k, v in meta.items() if k != "kind"})


def save_extractor(path, state: ContrastState, config: TrainConfig) -> Path:
    return save_checkpoint(path, extractor_state(state), _meta(config, "extractor"))


def load_extractor(path) -> tuple[ContrastState, TrainConfig]:
    params, meta = load_checkpoint(path)
    if meta.get("kind") not in ("extractor", "final"):
        raise ValueError(f"{path} is not an extractor checkpoint (kind={meta.get('kind')!r})")
    config = config_from_meta(meta)
    if meta["kind"] == "final":
        params = {k[len("extractor."):]: v for k, v in params.items() if k.startswith("extractor.")}
    return restore_extractor(config, params), config


def save_sr(path, net: SrNetwork, config: TrainConfig) -> Path:
    return save_checkpoint(path, net.state_dict(), _meta(config, "sr"))


def load_sr(path) -> tuple[SrNetwork, TrainConfig]:
    params, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if kind not in ("sr", "final"):
        raise ValueError(f"{path} is not an SR checkpoint (kind={kind!r})")
    config = config_from_meta(meta)
    net = SrNetwork(config, np.random.default_rng(0))
    net.load_state_dict(params, prefix="sr." if kind == "final" else "")
    return net, config


@dataclass
class StageResult:
    checkpoint: Path
    manifest: RunManifest
    extra: dict = field(default_factory=dict)


# ------------------------------------------------------------------- stages
def run_stage1(config: TrainConfig, out_dir, pool=None, manifest: RunManifest | None = None) -> StageResult:
    """Train both extractor branches on contrastive batches only."""
    own = manifest is None
    manifest = manifest or RunManifest(out_dir, config)
    try:
        with deterministic_mode(config.deterministic):
            init_rng, data_rng = _rngs(config, 1)
            source = _source(config, pool)
            state = ContrastState.create(config, init_rng)
            opt = Adam(state.online.parameters(), lr=config.lr_extractor)
            for _ in range(config.warmup_batches):
                state.warm_up(build_contrast_batch(source, data_rng, config))
            if not len(state.queues["blur"]):
                state.warm_up(build_contrast_batch(source, data_rng, config))
            guard = _DivergenceGuard(config.divergence_patience)
            for step in range(config.steps_stage1):
                batch = build_contrast_batch(source, data_rng, config)
                l_blur, l_noise = train_extractor_step(batch, state, opt)
                rec = LossRecord(cl_blur=l_blur, cl_noise=l_noise)
                manifest.log(1, step, rec, total_loss(rec, config.lambda_noise, config.lambda_blur))
                guard.check(max(l_blur, l_noise), len(state.queues["blur"]), step)
            path = save_extractor(Path(out_dir) / "extractor.ckpt", state, config)
            manifest.add_checkpoint("stage1", path)
            return StageResult(path, manifest, {"state": state})
    finally:
        if own:
            manifest.close()


def run_stage2(config: TrainConfig, extractor_ckpt, out_dir, pool=None,
               manifest: RunManifest | None = None) -> StageResult:
    """Train the SR network on L_SR (+ L_Reg) with the extractor frozen."""
    own = manifest is None
    manifest = manifest or RunManifest(out_dir, config)
    try:
        with deterministic_mode(config.deterministic):
            state, _ = load_extractor(extractor_ckpt)
            extractor = state.online
            for p in extractor.parameters():
                p.requires_grad = False
            before = params_digest(extractor)
            init_rng, data_rng = _rngs(config, 2)
            source = _source(config, pool)
            net = SrNetwork(config, init_rng)
            opt = Adam(net.parameters(), lr=config.lr_sr)
            for step in range(config.steps_stage2):
                lr, hr, specs = sample_sr_batch(source, data_rng, config)
                with T.no_grad():
                    dk, dn = conditioning(config, extractor, lr, specs)
                hr_t = to_nchw(hr)
                sr = net(to_nchw(lr), dk, dn)
                rec = LossRecord(sr=sr_restoration_loss(sr, hr_t))
                if config.use_reg:
                    rec.reg_noise, rec.reg_blur = regularization_loss(sr, hr_t, extractor)
                total = total_loss(rec, config.lambda_noise, config.lambda_blur)
                opt.zero_grad()
                total.backward()
                opt.step()
                manifest.log(2, step, rec, total.item())
            if params_digest(extractor) != before:
                raise RuntimeError("stage 2 modified extractor parameters")
            path = save_sr(Path(out_dir) / "sr.ckpt", net, config)
            manifest.add_checkpoint("stage2", path)
            return StageResult(path, manifest, {"net": net, "extractor_digest": before})
    finally:
        if own:
            manifest.close()


def run_stage3(config: TrainConfig, extractor_ckpt, sr_ckpt, out_dir, pool=None,
               manifest: RunManifest | None = None) -> StageResult:
    """Fine-tune everything on the total objective; queues stay live."""
    own = manifest is None
    manifest = manifest or RunManifest(out_dir, config)
    try:
        with deterministic_mode(config.deterministic):
            state, _ = load_extractor(extractor_ckpt)
            net, _ = load_sr(sr_ckpt)
            _, data_rng = _rngs(config, 3)
            source = _source(config, pool)
            params = state.online.parameters() + net.parameters()
            opt = Adam(params, lr=config.lr_finetune)
            if not len(state.queues["blur"]):
                for _ in range(max(1, config.warmup_batches)):
                    state.warm_up(build_contrast_batch(source, data_rng, config))
            guard = _DivergenceGuard(config.divergence_patience)
            for step in range(config.steps_stage3):
                batch = build_contrast_batch(source, data_rng, config)
                cl_blur, cl_noise, keys = contrastive_losses(batch, state)
                lr, hr, specs = sample_sr_batch(source, data_rng, config)
                dk, dn = conditioning(config, state.online, lr, specs)
                hr_t = to_nchw(hr)
                sr = net(to_nchw(lr), dk, dn)
                rec = LossRecord(cl_blur=cl_blur, cl_noise=cl_noise, sr=sr_restoration_loss(sr, hr_t))
                if config.use_reg:
                    rec.reg_noise, rec.reg_blur = regularization_loss(sr, hr_t, state.online)
                total = total_loss(rec, config.lambda_noise, config.lambda_blur)
                opt.zero_grad()
                total.backward()
                opt.step()
                finish_contrast_step(state, keys)
                manifest.log(3, step, rec, total.item())
                guard.check(max(rec.values()["cl_blur"], rec.values()["cl_noise"]),
                            len(state.queues["blur"]), step)
            params = {"extractor." + k: v for k, v in extractor_state(state).items()}
            params.update({"sr." + k: v for k, v in net.state_dict().items()})
            path = save_checkpoint(Path(out_dir) / "final.ckpt", params, _meta(config, "final"))
            manifest.add_checkpoint("stage3", path)
            return StageResult(path, manifest, {"state": state, "net": net})
    finally:
        if own:
            manifest.close()


def run_pipeline(config: TrainConfig, out_dir, pool=None, stages: int = 3) -> RunManifest:
    """Run stages 1..``stages`` into one directory and one manifest."""
    out_dir = Path(out_dir)
    with RunManifest(out_dir, config) as manifest:
        s1 = run_stage1(config, out_dir, pool, manifest)
        if stages >= 2:
            s2 = run_stage2(config, s1.checkpoint, out_dir, pool, manifest)
        if stages >= 3:
            run_stage3(config, s1.checkpoint, s2.checkpoint, out_dir, pool, manifest)
    return manifest
