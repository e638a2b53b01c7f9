import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddsr import tensor as T
from ddsr.config import TrainConfig
from ddsr.data import synthetic_pool
from ddsr.degradation import DegradationSpec
from ddsr.extractor import DualExtractor, ncrp_purify
from ddsr.tensor import Tensor
from ddsr.training import (
    LossRecord,
    RunManifest,
    TrainingDiverged,
    _DivergenceGuard,
    load_sr,
    oracle_embeddings,
    params_digest,
    regularization_loss,
    run_pipeline,
    run_stage1,
    run_stage2,
    total_loss,
)
from ddsr.wavelet import hf_tensor

from helpers import check_grads

TINY = dict(scale=2, patch_size=16, batch_size=2, enc_channels="4,4,4,4,4", proj_hidden=8, embed_dim=4,
            codebook_size=5, queue_size=16, warmup_batches=2, sr_channels=4, sr_blocks=1,
            toy_kernels="0.7/0.7/0; 2.0/1.0/45", toy_noise="0,10", synthetic_count=3, synthetic_size=40,
            steps_stage1=4, steps_stage2=4, steps_stage3=3, eval_count=2, eval_size=40)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


# -------------------------------------------------------------- total loss
def test_total_loss_zero():
    assert total_loss(LossRecord()) == 0.0


def test_total_loss_worked_example():
    rec = LossRecord(cl_blur=0.5, cl_noise=0.5, sr=0.2, reg_noise=0.001, reg_blur=0.01)
    assert abs(total_loss(rec) - 2.3) < 1e-12


@settings(max_examples=50)
@given(st.lists(st.floats(0, 10), min_size=5, max_size=5))
def test_total_loss_weighted_sum(v):
    rec = LossRecord(cl_blur=v[0], cl_noise=v[1], sr=v[2], reg_blur=v[3], reg_noise=v[4])
    assert abs(total_loss(rec) - (v[0] + v[1] + v[2] + 10 * v[3] + 1000 * v[4])) < 1e-12 * max(1, sum(v) * 1000)


def test_total_loss_names_non_finite_component():
    with pytest.raises(ValueError, match="reg_blur"):
        total_loss(LossRecord(reg_blur=float("nan")))


# ---------------------------------------------------------- regularization
@pytest.fixture(scope="module")
def extractor():
    return DualExtractor(tiny(), np.random.default_rng(3))


def test_regularization_zero_for_identical(extractor):
    hr = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 16, 16)))
    rn, rb = regularization_loss(hr, hr, extractor)
    assert rn.item() == 0.0 and rb.item() == 0.0


def test_regularization_matches_hand_composition(extractor):
    rng = np.random.default_rng(1)
    sr, hr = rng.uniform(size=(2, 2, 3, 16, 16))

    def purified(img, branch):
        x = hf_tensor(Tensor(img))
        q = T.l2_normalize(branch.projector(branch.encoder(x)), axis=-1)
        return ncrp_purify(q, branch.codebook, branch.projector).data

    with T.no_grad():
        exp_noise = np.abs(purified(sr, extractor.noise) - purified(hr, extractor.noise)).mean()
        exp_blur = np.abs(purified(sr, extractor.blur) - purified(hr, extractor.blur)).mean()
    rn, rb = regularization_loss(Tensor(sr), Tensor(hr), extractor)
    assert abs(rn.item() - exp_noise) < 1e-9
    assert abs(rb.item() - exp_blur) < 1e-9


def test_regularization_gradient_reaches_sr_only(extractor):
    rng = np.random.default_rng(2)
    sr = T.parameter(rng.uniform(size=(1, 3, 16, 16)))
    hr = Tensor(rng.uniform(size=(1, 3, 16, 16)))
    for p in extractor.parameters():
        p.grad = None
    rn, rb = regularization_loss(sr, hr, extractor)
    (rn * 1000.0 + rb * 10.0).backward()
    assert sr.grad is not None and np.any(sr.grad != 0)
    assert all(p.grad is None for p in extractor.parameters())
    assert all(p.requires_grad for p in extractor.parameters())


def test_regularization_gradient_matches_finite_differences(extractor):
    rng = np.random.default_rng(4)
    sr = T.parameter(rng.uniform(size=(1, 3, 16, 16)))
    hr = Tensor(rng.uniform(size=(1, 3, 16, 16)))

    def loss():
        rn, rb = regularization_loss(sr, hr, extractor)
        return rn + rb
    # small subset of pixels keeps the numerical check quick
    sub = T.parameter(sr.data[:, :, :4, :4].copy())

    def loss_sub():
        full = sr.data.copy()
        full[:, :, :4, :4] = 0
        pad = np.zeros_like(sr.data)
        pad[:, :, :4, :4] = 1
        mixed = Tensor(full) + T.concat([T.concat([sub, Tensor(np.zeros((1, 3, 4, 12)))], axis=3),
                                         Tensor(np.zeros((1, 3, 12, 16)))], axis=2)
        rn, rb = regularization_loss(mixed, hr, extractor)
        return rn + rb
    check_grads(loss_sub, [sub], rtol=1e-3, atol=1e-8, h=1e-6)
    assert np.isfinite(loss().item())


def test_regularization_rejects_shape_mismatch(extractor):
    with pytest.raises(ValueError):
        regularization_loss(np.zeros((1, 3, 16, 16)), np.zeros((1, 3, 16, 18)), extractor)


# -------------------------------------------------------------- oracle map
def test_oracle_embeddings_fixed_and_informative():
    specs = [DegradationSpec(1.0, 2.0, 0.3, 10.0), DegradationSpec(3.0, 1.0, 1.2, 0.0)]
    a = oracle_embeddings(specs, 8)
    b = oracle_embeddings(specs, 8)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert a[0].shape == (2, 8) and a[1].shape == (2, 8)
    assert not np.allclose(a[0][0], a[0][1]) and not np.allclose(a[1][0], a[1][1])
    # theta and theta + pi describe the same kernel
    c = oracle_embeddings([DegradationSpec(1.0, 2.0, 0.3 + np.pi, 10.0)], 8)
    np.testing.assert_allclose(c[0][0], a[0][0], atol=1e-12)


# ---------------------------------------------------------------- manifest
def test_manifest_rows_and_arithmetic(tmp_path):
    cfg = tiny()
    with RunManifest(tmp_path, cfg) as m:
        for step in range(3):
            rec = LossRecord(cl_blur=0.1 * step, sr=0.2, reg_noise=0.001)
            m.log(2, step, rec, total_loss(rec))
        with pytest.raises(ValueError):
            m.log(2, 1, LossRecord(), 0.0)
    lines = (tmp_path / "manifest.csv").read_text().splitlines()
    assert lines[0] == "stage,step,cl_blur,cl_noise,sr,reg_blur,reg_noise,total"
    assert len(lines) == 4
    for line in lines[1:]:
        vals = [float(v) for v in line.split(",")]
        assert abs(vals[2] + vals[3] + vals[4] + 10 * vals[5] + 1000 * vals[6] - vals[7]) < 1e-9
    assert TrainConfig.load(tmp_path / "config.txt") == cfg
    assert (tmp_path / "timing.txt").exists()


def test_divergence_guard():
    guard = _DivergenceGuard(3)
    guard.check(100.0, 10, 0)
    guard.check(1.0, 10, 1)
    guard.check(100.0, 10, 2)
    guard.check(100.0, 10, 3)
    with pytest.raises(TrainingDiverged):
        guard.check(100.0, 10, 4)


# ------------------------------------------------------------------ stages
@pytest.fixture(scope="module")
def pool():
    return synthetic_pool(3, 40, 0)


def test_stage2_never_touches_extractor(tmp_path, pool):
    cfg = tiny()
    s1 = run_stage1(cfg, tmp_path, pool)
    before = tmp_path.joinpath("extractor.ckpt").read_bytes()
    s2 = run_stage2(cfg, s1.checkpoint, tmp_path, pool)
    assert tmp_path.joinpath("extractor.ckpt").read_bytes() == before
    assert s2.extra["extractor_digest"] == params_digest(s1.extra["state"].online)
    net, loaded_cfg = load_sr(s2.checkpoint)
    assert loaded_cfg == cfg
    assert params_digest(net) == params_digest(s2.extra["net"])


def test_pipeline_reproducible_and_complete(tmp_path, pool):
    cfg = tiny()
    m1 = run_pipeline(cfg, tmp_path / "a", pool)
    run_pipeline(cfg, tmp_path / "b", pool)
    a = (tmp_path / "a" / "manifest.csv").read_bytes()
    assert a == (tmp_path / "b" / "manifest.csv").read_bytes()
    for name in ("extractor.ckpt", "sr.ckpt", "final.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert [s for s, _ in m1.checkpoints] == ["stage1", "stage2", "stage3"]
    run_txt = (tmp_path / "a" / "run.txt").read_text().splitlines()
    assert run_txt[0] == "[checkpoints]" and len(run_txt) == 4
    stages = [r["stage"] for r in m1.records]
    assert stages == [1] * 4 + [2] * 4 + [3] * 3
    assert all(np.isfinite(r["total"]) for r in m1.records)


def test_oracle_conditioning_trains(tmp_path, pool):
    cfg = tiny(conditioning="oracle")
    s1 = run_stage1(cfg, tmp_path, pool)
    s2 = run_stage2(cfg, s1.checkpoint, tmp_path, pool)
    assert np.all(np.isfinite(s2.manifest.series(2, "sr")))


def test_no_reg_leaves_reg_terms_zero(tmp_path, pool):
    cfg = tiny(use_reg=False)
    s1 = run_stage1(cfg, tmp_path, pool)
    s2 = run_stage2(cfg, s1.checkpoint, tmp_path, pool)
    assert np.all(s2.manifest.series(2, "reg_noise") == 0)
    assert np.all(s2.manifest.series(2, "sr") > 0)


@pytest.mark.parametrize("flag", ["use_wavelet", "use_constraints", "use_ncrp"])
def test_ablations_run(tmp_path, pool, flag):
    m = run_pipeline(tiny(**{flag: False}), tmp_path, pool)
    assert len(m.checkpoints) == 3
