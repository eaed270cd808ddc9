import math

import numpy as np
import pytest

from deltalora.linalg import make_rng
from deltalora.optim import AdamWState, NonFiniteError, TrainConfig, adamw_step, lr_at

from oracles import scalar_adamw_trajectory


def test_zero_gradient_only_decays():
    p = make_rng(0).normal(size=(3, 2))
    new, g_hat = adamw_step(p, np.zeros_like(p), AdamWState.for_param(p), 0.1, 0.3)
    assert np.array_equal(g_hat, np.zeros_like(p))
    np.testing.assert_allclose(new, (1 - 0.1 * 0.3) * p, rtol=0, atol=1e-15)


def test_memoryless_moments_give_sign_step():
    rng = make_rng(1)
    p, g = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    st = AdamWState(np.zeros_like(p), np.zeros_like(p), beta1=0.0, beta2=0.0, eps=1e-8)
    for _ in range(3):
        p_new, g_hat = adamw_step(p, g, st, 0.01, 0.0)
        np.testing.assert_allclose(g_hat, g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)
        np.testing.assert_allclose(p_new, p - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)
        p = p_new


def test_first_step_is_roughly_sign():
    p = np.zeros((1, 3))
    g = np.array([[2.0, -0.5, 1e-3]])
    _, g_hat = adamw_step(p, g, AdamWState.for_param(p), 1.0, 0.0)
    np.testing.assert_allclose(g_hat, np.sign(g), atol=1e-4)


@pytest.mark.parametrize("seed", range(5))
def test_matches_scalar_oracle_over_100_steps(seed):
    rng = make_rng(seed)
    p = rng.normal(size=(3, 2))
    grads = [rng.normal(size=p.shape) for _ in range(100)]
    eta, beta = 1e-2, 0.05
    st = AdamWState.for_param(p)
    cur = p
    for g in grads:
        cur, _ = adamw_step(cur, g, st, eta, beta)
        assert np.all(st.v >= 0)
    ref = scalar_adamw_trajectory(p.ravel(), [g.ravel() for g in grads], eta, beta)
    assert np.max(np.abs(cur.ravel() - np.array(ref))) < 1e-12
    assert st.t == 100


def test_non_finite_gradient_aborts():
    p = np.zeros((2, 2))
    g = np.array([[0.0, math.nan], [1.0, 0.0]])
    with pytest.raises(NonFiniteError):
        adamw_step(p, g, AdamWState.for_param(p), 0.1, 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eta=0.0, T=1)
    with pytest.raises(ValueError):
        TrainConfig(eta=1.0, T=1, mode="qlora")
    with pytest.raises(ValueError):
        TrainConfig(eta=1.0, T=-1)


def test_config_round_trip_and_lambda_key():
    cfg = TrainConfig(eta=0.1, T=3, lam=2.0, K=1)
    d = cfg.to_dict()
    assert d["lambda"] == 2.0 and "lam" not in d
    assert TrainConfig.from_dict(d) == cfg


def test_delta_factor():
    assert TrainConfig(eta=1, T=1, lam=2, alpha=32, r=4).delta_factor == 16.0
    assert TrainConfig(eta=1, T=1, lam=2, alpha=32, r=4, delta_alpha_scale=False).delta_factor == 2.0


def test_constant_schedule():
    cfg = TrainConfig(eta=0.3, T=10)
    assert {lr_at(cfg, t) for t in range(10)} == {0.3}


def test_linear_schedule_shape():
    cfg = TrainConfig(eta=1.0, T=110, warmup_steps=10, schedule="linear")
    assert lr_at(cfg, 0) == 0.0
    assert lr_at(cfg, 5) == pytest.approx(0.5)
    assert lr_at(cfg, 10) == 1.0
    assert lr_at(cfg, 60) == pytest.approx(0.5)
    assert lr_at(cfg, 110) == 0.0
    assert lr_at(cfg, 109) > 0.0


def test_linear_schedule_without_warmup_starts_at_eta():
    cfg = TrainConfig(eta=2.0, T=4, schedule="linear")
    assert [lr_at(cfg, t) for t in range(4)] == [2.0, 1.5, 1.0, 0.5]
