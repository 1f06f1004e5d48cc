import math

import numpy as np
import pytest

from oscqat.autodiff import Tensor, backward
from oscqat.nets import Ctx, LayerSpec, build_model
from oscqat.normstats import (
    BN_EPS,
    NormStats,
    StatsAccumulator,
    bn_forward_eval,
    bn_forward_train,
    bn_reestimate,
    gaussian_kl,
    kl_drift,
    kl_summary,
    oscillation_drift_demo,
)

from _fd import fd_grad, rel_err


def small_model(seed=0):
    specs = [
        LayerSpec("conv", 1, 4, kernel=3, stride=1),
        LayerSpec("bn"),
        LayerSpec("relu"),
        LayerSpec("depthwise-conv", 4, 4, kernel=3),
        LayerSpec("bn"),
        LayerSpec("relu"),
        LayerSpec("pool"),
        LayerSpec("linear", 4, 3),
    ]
    return build_model(specs, w_bits=3, seed=seed)


# KL drift formula


def test_kl_hand_cases_exact():
    assert kl_drift(0.0, 1.0, 0.0, 1.0) == 0.0
    assert kl_drift(1.0, 1.0, 0.0, 1.0) == 0.5
    assert kl_drift(0.0, 1.0, 0.0, 2.0) == math.log(4) + 1 / 8 - 1 / 2


def test_kl_vectorized_per_channel():
    out = kl_drift([0.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 2.0])
    assert out.shape == (3,)
    assert out[1] == 0.5


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        kl_drift(0.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        gaussian_kl(0.0, 1.0, 0.0, -1.0)


def test_exact_kl_is_nonnegative_where_drift_dips():
    # estimate slightly narrower than the population
    assert kl_drift(0.0, 1.0, 0.0, 0.9) < 0.0
    assert gaussian_kl(0.0, 1.0, 0.0, 0.9) > 0.0
    rng = np.random.default_rng(0)
    m1, m2 = rng.normal(size=(2, 500))
    s1, s2 = rng.uniform(0.1, 3.0, size=(2, 500))
    assert np.all(gaussian_kl(m1, s1, m2, s2) >= -1e-15)


def test_kl_summary_reports_max_and_mean():
    pop = NormStats(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    est = NormStats(np.array([0.0, 0.0]), np.array([1.0, 1.0]))
    out = kl_summary(pop, est)
    assert out["max"] == 0.5 and out["mean"] == 0.25
    assert out["exact_max"] == 0.5


# forward passes and running statistics


def test_train_forward_normalizes_and_updates_ema():
    rng = np.random.default_rng(1)
    x = 3.0 + 2.0 * rng.standard_normal((8, 2, 4, 4))
    stats = NormStats.init(2)
    out = bn_forward_train(Tensor(x), stats, Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    assert np.allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-4)
    mu = x.mean(axis=(0, 2, 3))
    var_unbiased = x.var(axis=(0, 2, 3), ddof=1)
    assert np.allclose(stats.mean, 0.1 * mu)
    assert np.allclose(stats.var, 0.9 + 0.1 * var_unbiased)


def test_constant_channel_outputs_beta():
    x = np.full((4, 1, 3, 3), 2.5)
    beta = Tensor(np.array([0.7]))
    out = bn_forward_train(Tensor(x), NormStats.init(1), Tensor(np.array([1.3])), beta)
    assert np.allclose(out.data, 0.7)


def test_variance_floor():
    stats = NormStats(np.zeros(1), np.full(1, 1e-13), momentum=0.5)
    bn_forward_train(Tensor(np.zeros((4, 1))), stats, Tensor(np.ones(1)), Tensor(np.zeros(1)))
    assert stats.var[0] >= 1e-12


def test_ema_converges_to_stationary_stats():
    rng = np.random.default_rng(2)
    stats = NormStats.init(1)
    g, b = Tensor(np.ones(1)), Tensor(np.zeros(1))
    for _ in range(400):
        bn_forward_train(Tensor(5.0 + 0.5 * rng.standard_normal((256, 1))), stats, g, b)
    assert abs(stats.mean[0] - 5.0) < 0.02
    assert abs(stats.var[0] - 0.25) < 0.02


def test_batch_of_one_rejected():
    with pytest.raises(ValueError):
        bn_forward_train(Tensor(np.ones((1, 2))), NormStats.init(2), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_channel_mismatch_rejected():
    with pytest.raises(ValueError):
        bn_forward_train(Tensor(np.ones((4, 3))), NormStats.init(2), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_momentum_range():
    with pytest.raises(ValueError):
        NormStats.init(2, momentum=1.0)


def test_eval_forward_uses_running_stats():
    stats = NormStats(np.array([1.0]), np.array([4.0]))
    x = np.array([[3.0], [1.0]])
    out = bn_forward_eval(Tensor(x), stats, Tensor(np.array([2.0])), Tensor(np.array([0.5])))
    expected = 2.0 * (x - 1.0) / np.sqrt(4.0 + BN_EPS) + 0.5
    assert np.allclose(out.data, expected)


@pytest.mark.parametrize("train", [True, False])
def test_bn_backward_matches_finite_differences(train):
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((5, 3, 2, 2))
    g0, b0 = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
    coef = rng.standard_normal(x0.shape)
    stats = NormStats(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))

    def f(x, g, b):
        fwd = bn_forward_train if train else bn_forward_eval
        kw = {"update": False} if train else {}
        return fwd(x, stats.copy(), g, b, **kw)

    x, g, b = Tensor(x0, requires_grad=True), Tensor(g0, requires_grad=True), Tensor(b0, requires_grad=True)
    backward((f(x, g, b) * Tensor(coef)).sum())
    num = lambda arr, which: fd_grad(  # noqa: E731
        lambda v: float((f(*[Tensor(v) if k == which else Tensor(a) for k, a in enumerate((x0, g0, b0))]).data * coef).sum()),
        arr,
    )
    assert rel_err(x.grad, num(x0, 0)) < 1e-6
    assert rel_err(g.grad, num(g0, 1)) < 1e-6
    assert rel_err(b.grad, num(b0, 2)) < 1e-6


# streaming accumulator and re-estimation


def test_accumulator_matches_pooled_statistics():
    rng = np.random.default_rng(4)
    parts = [rng.standard_normal((n, 3, 2, 2)) * 2 + 1 for n in (3, 7, 1, 5)]
    acc = StatsAccumulator()
    for p in parts:
        acc.update(p)
    pooled = np.concatenate(parts)
    mean, var = acc.result()
    assert np.allclose(mean, pooled.mean(axis=(0, 2, 3)), atol=1e-14)
    assert np.allclose(var, pooled.var(axis=(0, 2, 3), ddof=1), atol=1e-13)


def test_accumulator_needs_two_samples():
    acc = StatsAccumulator()
    with pytest.raises(ValueError):
        acc.result()
    acc.update(np.ones((1, 2)))
    with pytest.raises(ValueError):
        acc.result()


def _population(model, batches):
    accs = None
    for xb in batches:
        captured = model.collect_bn_inputs(xb)
        accs = accs or [StatsAccumulator() for _ in captured]
        for a, h in zip(accs, captured):
            a.update(h)
    return [a.result() for a in accs]


def test_reestimation_drives_on_data_kl_to_zero():
    model = small_model()
    rng = np.random.default_rng(5)
    batches = [rng.uniform(0, 1, (16, 1, 8, 8)) for _ in range(4)]
    model(batches[0], Ctx(bn="train"))  # corrupt the running stats a little
    bn_reestimate(model, batches)
    for (mean, var), bn in zip(_population(model, batches), model.batchnorms()):
        out = kl_summary((mean, var), bn.stats)
        assert abs(out["max"]) <= 1e-9
        assert out["exact_max"] <= 1e-9


def test_reestimation_is_idempotent_and_leaves_params_untouched():
    model = small_model()
    rng = np.random.default_rng(6)
    batches = [rng.uniform(0, 1, (8, 1, 8, 8)) for _ in range(3)]
    params = {k: v.data.copy() for k, v in model.parameters().items()}
    first = [s.copy() for s in bn_reestimate(model, batches)]
    second = bn_reestimate(model, batches)
    for a, b in zip(first, second):
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.var, b.var)
    for k, v in model.parameters().items():
        assert np.array_equal(v.data, params[k])


def test_reestimation_single_batch_equals_batch_statistics():
    model = small_model()
    xb = np.random.default_rng(7).uniform(0, 1, (8, 1, 8, 8))
    stats = bn_reestimate(model, [xb])
    for s, h in zip(stats, model.collect_bn_inputs(xb)):
        assert np.allclose(s.mean, h.mean(axis=(0, 2, 3)), atol=1e-14)
        assert np.allclose(s.var, h.var(axis=(0, 2, 3), ddof=1), atol=1e-13)


def test_reestimation_needs_data():
    with pytest.raises(ValueError):
        bn_reestimate(small_model(), [])


# oscillation-driven drift


@pytest.mark.parametrize("seed", range(3))
def test_drift_demo_ordering(seed):
    low = oscillation_drift_demo(3, seed=seed)
    high = oscillation_drift_demo(8, seed=seed)
    frozen = oscillation_drift_demo(3, frozen=True, seed=seed)
    assert low["kl"] > high["kl"]
    assert low["kl"] > frozen["kl"]
    assert low["exact_kl"] > high["exact_kl"]
    assert low["exact_kl"] > frozen["exact_kl"]
