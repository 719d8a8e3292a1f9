from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from conftest import random_states, randomize, small_config
from oracles import ess_percent, w2_diagonal, w2_scalar
from splitbg import autodiff as ad
from splitbg.architecture import build_split_flow
from splitbg.autodiff import Tape, Tensor
from splitbg.energy import DoubleWellTarget
from splitbg.flow import CoordinateLayout
from splitbg.systems import toy_chain
from splitbg.training import (
    METRIC_COLUMNS,
    AdamW,
    PlateauScheduler,
    Stage,
    TrainConfig,
    _ramp,
    batch_moments,
    default_stages,
    fit_reference_moments,
    gaussian_w2,
    importance_metrics,
    importance_weights,
    kl_loss,
    nll_loss,
    psd_sqrt,
    run_schedule,
    streaming_moments,
    w2_loss,
)


def spd(rng, d):
    m = rng.standard_normal((d, d))
    return m @ m.T / d + 0.1 * np.eye(d)


def w2_sqrtm(mu_q, cq, mu_p, cp):
    """General formula through scipy's matrix square root."""
    r = linalg.sqrtm(cp)
    cross = linalg.sqrtm(r @ cq @ r).real
    return float(np.sum((mu_q - mu_p) ** 2) + np.trace(cq) + np.trace(cp) - 2 * np.trace(cross))


def test_w2_scalar_case_frozen():
    # N(0,1) vs N(1,4): (0-1)^2 + (1-2)^2 = 2
    v = gaussian_w2(np.zeros(1), np.eye(1), np.ones(1), 4 * np.eye(1), reg=0.0).value
    assert abs(v - 2.0) < 1e-12
    assert abs(v - w2_scalar(0, 1, 1, 2)) < 1e-12


def test_w2_against_scipy_sqrtm(rng):
    for d in (2, 5, 9):
        mq, mp = rng.standard_normal(d), rng.standard_normal(d)
        cq, cp = spd(rng, d), spd(rng, d)
        got = gaussian_w2(mq, cq, mp, cp, reg=0.0).value
        assert abs(got - w2_sqrtm(mq, cq, mp, cp)) < 1e-8
        assert abs(got - gaussian_w2(mp, cp, mq, cq, reg=0.0).value) < 1e-8
        assert got >= -1e-10


def test_w2_commuting_covariances(rng):
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    a, b = rng.uniform(0.2, 3, 4), rng.uniform(0.2, 3, 4)
    cq, cp = q @ np.diag(a) @ q.T, q @ np.diag(b) @ q.T
    got = gaussian_w2(np.zeros(4), cq, np.zeros(4), cp, reg=0.0).value
    assert abs(got - np.sum((np.sqrt(a) - np.sqrt(b)) ** 2)) < 1e-10
    assert abs(w2_diagonal(np.zeros(4), a, np.zeros(4), b) - np.sum((np.sqrt(a) - np.sqrt(b)) ** 2)) < 1e-14


def test_w2_regulariser_is_added_to_both(rng):
    c = spd(rng, 3)
    v = gaussian_w2(np.zeros(3), c, np.zeros(3), c).value
    assert abs(v) < 1e-10


def test_psd_sqrt(rng):
    c = spd(rng, 6)
    r = psd_sqrt(c).value
    assert np.max(np.abs(r @ r - c)) < 1e-12 and np.allclose(r, r.T)
    singular = np.diag([2.0, 0.0, 1.0])
    assert np.allclose(psd_sqrt(singular).value, np.diag(np.sqrt([2.0, 0.0, 1.0])))
    with pytest.raises(ValueError):
        psd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        psd_sqrt(np.ones((2, 3)))


@pytest.mark.parametrize("c,expected", [(1.0, 0.5), (4.0, 0.25)])
def test_trace_sqrt_gradient(c, expected):
    # d tr(sqrt(C)) / dC = C^{-1/2} / 2; at C = cI that is I / (2 sqrt c)
    _, (g,) = ad.grad(lambda m: ad.trace(psd_sqrt(m)), c * np.eye(3))
    assert np.allclose(g, expected * np.eye(3), atol=1e-10)


def test_w2_gradient_finite_differences(rng):
    feats = rng.standard_normal((40, 3)) @ rng.standard_normal((3, 3))
    ref = streaming_moments([rng.standard_normal((100, 3))])
    err = ad.finite_diff_check(lambda t: w2_loss(t.reshape((40, 3)), ref), feats.ravel(), h=1e-6,
                               indices=range(0, 120, 7))
    assert err < 1e-5


def test_batch_moments_match_numpy(rng):
    v = rng.standard_normal((30, 4))
    mu, cov = batch_moments(v)
    assert np.allclose(mu.value, v.mean(0)) and np.allclose(cov.value, np.cov(v.T), atol=1e-14)
    with pytest.raises(ValueError):
        batch_moments(v[:1])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=6), st.integers(0, 1000))
def test_streaming_moments_match_one_pass(sizes, seed):
    rng = np.random.default_rng(seed)
    chunks = [rng.standard_normal((n, 3)) * [1, 10, 0.1] + 5 for n in sizes]
    data = np.concatenate(chunks)
    if len(data) < 2:
        return
    m = streaming_moments(chunks)
    assert m.n == len(data)
    assert np.allclose(m.mean, data.mean(0), atol=1e-12)
    assert np.allclose(m.cov, np.cov(data.T), atol=1e-10)


def test_reference_moments_and_w2_of_identical_sets(rng):
    x = rng.standard_normal((200, 4))
    m = fit_reference_moments(x, lambda b: b, chunk=37)
    assert abs(w2_loss(x, m).value) < 1e-8
    with pytest.raises(ValueError):
        w2_loss(x[:, :3], m)


def test_importance_weights():
    assert abs(importance_weights(np.zeros(50)).ess - 100.0) < 1e-12
    lw = np.full(100, -1e4)
    lw[3] = 0.0
    assert abs(importance_weights(lw).ess - 1.0) < 1e-2
    r = importance_weights(np.array([0.1, -2.0, 3.0]))
    assert abs(r.ess - importance_weights(np.array([0.1, -2.0, 3.0]) + 123.0).ess) < 1e-12
    dyadic = np.array([0.25, -2.0, 3.0])
    assert importance_weights(dyadic).ess == importance_weights(dyadic + 128.0).ess
    assert abs(r.ess - ess_percent([0.1, -2.0, 3.0])) < 1e-12
    assert abs(r.weights.sum() - 1.0) < 1e-15
    assert importance_weights(np.full(3, -np.inf)).degenerate
    assert importance_weights(np.zeros(0)).degenerate


def test_importance_metrics_on_exact_target():
    t = DoubleWellTarget()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((500, 2))
    logq = -t.reduced_energy(x) - t.log_normalizer()
    assert abs(importance_metrics(x, logq, t).ess - 100.0) < 1e-9
    with pytest.raises(ValueError):
        importance_metrics(x, logq[:-1], t)


def test_nll_loss_is_mean_negative_log_prob(make_flow):
    flow = make_flow(CoordinateLayout.euclidean(2), 2, 1)
    x = np.random.default_rng(0).standard_normal((16, 2))
    assert abs(nll_loss(flow, x).value + flow.log_prob(x).value.mean()) < 1e-12
    with pytest.raises(ValueError):
        nll_loss(flow, np.zeros((0, 2)))


def test_kl_loss_value_and_clip(make_flow):
    flow = make_flow(CoordinateLayout.euclidean(2), 2, 1)
    t = DoubleWellTarget()
    z = np.random.default_rng(1).standard_normal((32, 2))
    loss, info = kl_loss(flow, t, 32, None, z=z)
    x, ld = flow.forward(z)
    assert abs(loss.value - np.mean(t.reduced_energy(x.value) - ld.value)) < 1e-12
    assert info.n_clipped == 0
    clip = float(np.median(info.energies))
    with Tape() as tape:
        loss, info = kl_loss(flow, t, 32, None, clip=clip, z=z)
    assert info.n_clipped == int(np.sum(info.energies > clip))
    expected = np.mean(np.where(info.energies > clip, clip, info.energies) - ld.value)
    assert abs(loss.value - expected) < 1e-12
    with pytest.raises(ValueError):
        kl_loss(flow, t, 0, np.random.default_rng(0))


def test_adamw_first_step_frozen():
    p = ad.Parameter(np.array([1.0, -2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    opt.step([np.array([0.5, -3.0])])
    # bias-corrected first step moves each entry by lr * (sign(g) + wd * p)
    assert np.allclose(p.value, [1.0 - 0.1 * (1 + 0.01), -2.0 - 0.1 * (-1 - 0.02)], atol=1e-7)


def test_plateau_scheduler():
    p = ad.Parameter(np.zeros(1))
    opt = AdamW([p], lr=1.0)
    sched = PlateauScheduler(opt, patience=2, factor=0.1)
    for m in [5.0, 4.0, 4.0, 4.0]:
        sched.step(m)
    assert opt.lr == 1.0
    sched.step(4.0)
    assert abs(opt.lr - 0.1) < 1e-15
    sched.step(3.0)
    assert abs(opt.lr - 0.1) < 1e-15


def test_schedule_helpers():
    assert [s.epochs for s in default_stages(0.1)] == [20, 5, 2, 1]
    assert [s.epochs for s in default_stages(1.0)] == [200, 50, 20, 10]
    s = default_stages()
    assert (s[0].w2, s[0].kl, s[1].w2, s[2].kl, s[3].w2, s[3].kl) == (False, False, True, True, False, True)
    assert _ramp(0, 100, 0.1) == 0.1 and _ramp(9, 100, 0.1) == 1.0 and _ramp(50, 100, 0.0) == 1.0
    cfg = TrainConfig(stages=[Stage("a", 1), Stage("b", 2, w2=True)])
    assert TrainConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(KeyError):
        TrainConfig.from_json({"learning_rate": 1.0})
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1).validate()
    assert [st_.lr_scale for st_ in s] == [1.0, 0.1, 0.1, 0.1]
    with pytest.raises(ValueError):
        TrainConfig(stages=[Stage("a", 1, lr_scale=0.0)]).validate()


def tiny_run(out_dir=None, start=0, flow=None, save=None):
    t = DoubleWellTarget()
    rng = np.random.default_rng(0)
    data = np.stack([rng.choice([-1.0, 1.0], 600) + 0.3 * rng.standard_normal(600),
                     1.4 * rng.standard_normal(600)], axis=1)
    if flow is None:
        flow = build_split_flow(CoordinateLayout.euclidean(2), small_config(2, 2), 0)
        flow.fit_statistics(data)
    cfg = TrainConfig(batch_size=128, eval_samples=64, seed=3,
                      stages=[Stage("nll", 2), Stage("nll_w2", 1, w2=True),
                              Stage("all", 1, w2=True, kl=True), Stage("kl", 1, kl=True)])
    return flow, run_schedule(flow, data, t, cfg, out_dir=out_dir, start_stage=start, save=save)


def test_run_schedule_metrics_and_determinism():
    flow_a, a = tiny_run()
    flow_b, b = tiny_run()
    assert a.csv_text() == b.csv_text()
    lines = a.csv_text().splitlines()
    assert lines[0].split(",") == METRIC_COLUMNS
    assert len(lines) == 1 + 5
    rows = [line.split(",") for line in lines[1:]]
    assert [r[1] for r in rows] == ["1", "1", "2", "3", "4"]
    assert rows[0][3] == "" and rows[0][4] == "" and rows[-1][3] == ""
    assert all(r[-1] == "" for r in rows)
    assert all(np.array_equal(p, q) for p, q in zip(flow_a.parameter_arrays(), flow_b.parameter_arrays()))


def test_resume_reproduces_uninterrupted_run(tmp_path):
    from splitbg.io import load_checkpoint, save_checkpoint

    full, res = tiny_run(tmp_path, save=save_checkpoint)
    assert [p.name for p in res.checkpoints] == ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "stage4.ckpt"]
    resumed, _ = load_checkpoint(tmp_path / "stage2.ckpt")
    _, rest = tiny_run(start=2, flow=resumed)
    assert all(np.array_equal(p, q) for p, q in zip(full.parameter_arrays(), resumed.parameter_arrays()))
    assert rest.csv_text().splitlines()[1:] == res.csv_text().splitlines()[-2:]


def test_training_reduces_nll(make_flow):
    flow = build_split_flow(CoordinateLayout.euclidean(2), small_config(2, 2), 0)
    rng = np.random.default_rng(1)
    data = np.stack([rng.choice([-1.0, 1.0], 2000) + 0.25 * rng.standard_normal(2000),
                     rng.standard_normal(2000)], axis=1)
    flow.fit_statistics(data)
    before = nll_loss(flow, data).value
    cfg = TrainConfig(batch_size=200, eval_samples=0, stages=[Stage("nll", 4)])
    run_schedule(flow, data, DoubleWellTarget(), cfg)
    assert nll_loss(flow, data).value < before - 0.1


def test_divergence_is_reported():
    from splitbg.training import TrainingDivergence

    class Exploding(DoubleWellTarget):
        def reduced_energy(self, x):
            return ad.exp(ad.as_tensor(x) * 1e4).sum(axis=-1)

    flow = build_split_flow(CoordinateLayout.euclidean(2), small_config(1, 1), 0)
    data = np.random.default_rng(0).standard_normal((64, 2))
    cfg = TrainConfig(batch_size=32, eval_samples=0, stages=[Stage("kl", 1, nll=False, kl=True)])
    with np.errstate(over="ignore"), pytest.raises(TrainingDivergence):
        run_schedule(flow, data, Exploding(), cfg)


def test_chain_kl_gradient_reaches_parameters():
    s = toy_chain(2)
    flow = build_split_flow(s.topology, small_config(1, 1), 0)
    flow.fit_statistics(random_states(flow.layout, 200, np.random.default_rng(0)))
    randomize(flow, 5, head_scale=0.1)
    with Tape() as tape:
        loss, _ = kl_loss(flow, s.target(), 8, np.random.default_rng(1), clip=1e12)
        grads = tape.gradient(loss, flow.parameters())
    assert all(np.all(np.isfinite(g)) for g in grads)
    assert sum(float(np.abs(g).sum()) for g in grads) > 0
    assert isinstance(loss, Tensor)
