import math
from collections import Counter

import numpy as np
import pytest

from prom3e.config import LossConfig, ModelConfig, RunConfig, SynthConfig, stream
from prom3e.model import ModelParams, NonFiniteError, VisibleSet, load_checkpoint
from prom3e.synthdata import generate, split
from prom3e.trainer import (
    ALPHA_CEILING,
    AdamW,
    batch_loss,
    cosine_lr,
    evaluate,
    fit,
    model_grad_check,
    params_digest,
    sample_visible_set,
    train_step,
    validation_schedule,
)


def _tiny(seed=0, M=3, D=6, E=8):
    cfg = ModelConfig(modality_count=M, d_in=D, encoder_dim=E, registers=2)
    return ModelParams.init(cfg, LossConfig(), np.random.default_rng(seed))


def _batch(B=8, M=3, D=6, seed=0):
    rng = np.random.default_rng(seed)
    out = [rng.normal(size=(B, D)) for _ in range(M)]
    return [e / np.linalg.norm(e, axis=1, keepdims=True) for e in out]


# masking ------------------------------------------------------------------------------------


def test_visible_frequency_is_one_quarter():
    rng = stream(0, "masking")
    counts = np.zeros(6)
    n = 100_000
    for _ in range(n):
        for m in sample_visible_set(rng, 6).visible:
            counts[m] += 1
    assert np.all(np.abs(counts / n - 0.25) <= 0.01)


def test_two_modalities_enumerates_all_sets():
    rng = np.random.default_rng(0)
    seen = Counter(sample_visible_set(rng, 2).visible for _ in range(2000))
    assert set(seen) == {(0,), (1,), (0, 1)}


def test_masking_sequence_is_seeded():
    r1, r2 = stream(4, "masking"), stream(4, "masking")
    assert [sample_visible_set(r1, 6) for _ in range(50)] == [sample_visible_set(r2, 6) for _ in range(50)]


def test_targets_all_or_masked_only():
    rng = np.random.default_rng(1)
    vs = sample_visible_set(rng, 6)
    assert vs.targets == tuple(range(6))
    vs = sample_visible_set(rng, 6, masked_only=True)
    assert set(vs.targets) == set(range(6)) - set(vs.visible)


def test_masking_needs_two_modalities():
    with pytest.raises(ValueError):
        sample_visible_set(np.random.default_rng(0), 1)


# schedule and optimizer -----------------------------------------------------------------------


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, abs=1e-18)
    assert cosine_lr(100, 100, 1e-3) == 0.0
    values = [cosine_lr(t, 100, 1.0) for t in range(101)]
    assert all(a >= b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("wd", [0.0, 0.1])
def test_adamw_scalar_trace(wd):
    # f(x) = (x - 3)^2, stepped by hand with the textbook AdamW recurrences
    lr, b1, b2, eps = 0.1, 0.9, 0.98, 1e-8
    opt = AdamW(["x"], [()], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    x = {"x": np.array(0.5)}
    hx, m, v = 0.5, 0.0, 0.0
    for t in range(1, 6):
        g = 2 * (x["x"] - 3.0)
        opt.step(x, {"x": g})
        hg = 2 * (hx - 3.0)
        m = b1 * m + (1 - b1) * hg
        v = b2 * v + (1 - b2) * hg * hg
        hx = hx * (1 - lr * wd)
        hx = hx - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert float(x["x"]) == pytest.approx(hx, abs=1e-15)


def test_zero_lr_and_decay_leave_params_unchanged():
    p = _tiny()
    before = {k: v.copy() for k, v in p.state().items()}
    opt = AdamW.for_params(p, lr=0.0, weight_decay=0.0)
    train_step(p, opt, _batch(), VisibleSet.of([0], 3), LossConfig(), np.random.default_rng(0), lr=0.0)
    for k, v in p.state().items():
        assert v.tobytes() == before[k].tobytes()


def test_one_step_lowers_the_same_batch_loss():
    p = _tiny(seed=2)
    embs = _batch(seed=3)
    vs = VisibleSet.of([0, 2], 3)
    before = float(batch_loss(p, embs, vs, LossConfig(), rng=np.random.default_rng(9))[0].data)
    opt = AdamW.for_params(p, lr=1e-4)
    train_step(p, opt, embs, vs, LossConfig(), np.random.default_rng(9), lr=1e-4)
    after = float(batch_loss(p, embs, vs, LossConfig(), rng=np.random.default_rng(9))[0].data)
    assert after < before


def test_decay_skips_tokens_and_biases():
    p = _tiny()
    opt = AdamW.for_params(p, lr=0.1, weight_decay=0.5)
    zero = {k: np.zeros_like(v) for k, v in p.state().items()}
    before = {k: v.copy() for k, v in p.state().items()}
    opt.step(p.state(), zero, 0.1)
    np.testing.assert_array_equal(p["mu_token"].data, before["mu_token"])
    np.testing.assert_array_equal(p["alpha"].data, before["alpha"])
    np.testing.assert_allclose(p["proj.0.w1"].data, before["proj.0.w1"] * 0.95, rtol=1e-15)


def test_alpha_is_clamped_negative():
    p = _tiny()
    p["alpha"].data[...] = -1e-5
    opt = AdamW.for_params(p, lr=1e-3)
    train_step(p, opt, _batch(), VisibleSet.of([1], 3), LossConfig(), np.random.default_rng(0), lr=1e-3)
    assert float(p["alpha"].data) <= ALPHA_CEILING


def test_non_finite_loss_reports_step_and_visible_set():
    p = _tiny()
    p["decoder.0.b2"].data[0] = np.inf
    opt = AdamW.for_params(p)
    with pytest.raises(NonFiniteError, match=r"step 17.*\(1,\)"):
        train_step(p, opt, _batch(), VisibleSet.of([1], 3), LossConfig(), np.random.default_rng(0), lr=1e-4, step_index=17)


def test_batch_of_one_rejected():
    p = _tiny()
    with pytest.raises(ValueError):
        train_step(p, AdamW.for_params(p), _batch(B=1), VisibleSet.of([0], 3), LossConfig(), np.random.default_rng(0), 1e-4)


class _Recording(AdamW):
    def step(self, values, grads, lr=None):
        self.seen = grads
        super().step(values, grads, lr)


@pytest.mark.parametrize("clip", [0.0, 1e-3])
def test_grad_clip_bounds_gradient_norm(clip):
    p = _tiny()
    opt = _Recording.for_params(p)
    train_step(p, opt, _batch(), VisibleSet.of([0], 3), LossConfig(), np.random.default_rng(0), 1e-4, grad_clip=clip)
    norm = math.sqrt(sum(float((g * g).sum()) for g in opt.seen.values()))
    if clip:
        assert norm == pytest.approx(clip, rel=1e-9)
    else:
        assert norm > 1e-3


# validation and fit -------------------------------------------------------------------------------


def test_validation_schedule_cycles_singletons():
    sched = validation_schedule(3, 7)
    assert [vs.visible for vs in sched] == [(0,), (1,), (2,), (0,), (1,), (2,), (0,)]


def _tiny_run(epochs=2, seed=0):
    rc = RunConfig()
    rc.update({"modality_count": 3, "d_in": 8, "encoder_dim": 8, "registers": 2, "epochs": epochs, "batch_size": 16, "seed": seed})
    rc.synth = SynthConfig(modality_count=3, d_in=8, records=96, species=6, seed=seed)
    ds = generate(rc.synth)
    return rc, split(ds, (64 / 96, 16 / 96, 16 / 96), seed=seed)


def test_evaluate_does_not_mutate_params():
    rc, (train, val, _) = _tiny_run()
    p = ModelParams.init(rc.model, rc.loss, np.random.default_rng(0))
    d = params_digest(p)
    evaluate(p, val, rc.loss, 16)
    assert params_digest(p) == d


def test_fit_writes_reloadable_checkpoint(tmp_path):
    rc, (train, val, _) = _tiny_run()
    path = tmp_path / "c.pm3c"
    params, report = fit(train, val, rc, checkpoint_path=path)
    assert len(train) == 64 and len(report.train_total) == 2
    assert all(np.isfinite(report.train_total)) and all(np.isfinite(report.val_total))
    q, rc2 = load_checkpoint(path)
    assert evaluate(q, val, rc2.loss, rc2.train.batch_size) == report.best_val
    assert report.best_val == min(report.val_total)


def test_fit_is_deterministic(tmp_path):
    rc, (train, val, _) = _tiny_run(epochs=3, seed=5)
    fit(train, val, rc, checkpoint_path=tmp_path / "a.pm3c")
    rc_b, (train_b, val_b, _) = _tiny_run(epochs=3, seed=5)
    fit(train_b, val_b, rc_b, checkpoint_path=tmp_path / "b.pm3c")
    assert (tmp_path / "a.pm3c").read_bytes() == (tmp_path / "b.pm3c").read_bytes()


def test_masked_only_and_mse_modes_train(tmp_path):
    rc, (train, val, _) = _tiny_run()
    rc.update({"masked_only_targets": True, "loss_kind": "mse"})
    _, report = fit(train, val, rc)
    assert all(np.isfinite(report.train_total))


# gradient checks -----------------------------------------------------------------------------------


def test_model_grad_check():
    err, where = model_grad_check(encoder_dim=8, modality_count=3, batch=4)
    assert err < 1e-4, where


def test_model_grad_check_identity_activation():
    err, where = model_grad_check(identity_activation=True)
    assert err < 1e-6, where


def test_model_grad_check_zero_decoders():
    err, where = model_grad_check(zero_decoders=True)
    assert err < 1e-4, where
