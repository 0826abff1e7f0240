"""Flow-matching engine: path, loss, samplers, analytic-field oracles."""

import numpy as np
import pytest

from prediflow import flow
from prediflow import tensor as T
from prediflow.errors import DimensionError, UsageError


def test_flow_time_bounds():
    flow.FlowTime(0.0)
    flow.FlowTime(1.0)
    with pytest.raises(UsageError):
        flow.FlowTime(1.5)
    with pytest.raises(UsageError):
        flow.FlowTime(-0.01)


def test_interpolate_endpoints():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, 3)).astype(np.float32)
    x1 = rng.standard_normal((4, 3)).astype(np.float32)
    np.testing.assert_array_equal(flow.interpolate(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(flow.interpolate(x0, x1, 1.0), x1)
    np.testing.assert_allclose(
        flow.interpolate(np.zeros(3, np.float32), np.full(3, 2.0, np.float32), 0.5),
        np.ones(3),
    )


def test_interpolate_per_sample_t():
    x0 = np.zeros((3, 2), np.float32)
    x1 = np.ones((3, 2), np.float32)
    t = np.array([0.0, 0.5, 1.0], np.float32)
    out = flow.interpolate(x0, x1, t)
    np.testing.assert_allclose(out, [[0, 0], [0.5, 0.5], [1, 1]])


def test_interpolate_validation():
    with pytest.raises(DimensionError):
        flow.interpolate(np.zeros(3, np.float32), np.zeros(4, np.float32), 0.5)
    with pytest.raises(UsageError):
        flow.interpolate(np.zeros(3, np.float32), np.zeros(3, np.float32), 1.2)


def test_flow_sample_invariant():
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal(5).astype(np.float32)
    x1 = rng.standard_normal(5).astype(np.float32)
    s = flow.make_flow_sample(x0, x1, 0.3)
    np.testing.assert_allclose(s.xt, 0.3 * x1 + 0.7 * x0, rtol=1e-6)


def test_fm_loss_perfect_velocity_is_zero():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((2, 3)).astype(np.float32)
    x1 = rng.standard_normal((2, 3)).astype(np.float32)
    u = T.Tensor(x1 - x0)
    assert flow.fm_loss(u, x0, x1).item() == 0.0


def test_fm_loss_uniform_offset():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((4, 5)).astype(np.float32)
    x1 = rng.standard_normal((4, 5)).astype(np.float32)
    eps = 0.37
    u = T.Tensor(x1 - x0 + eps)
    assert flow.fm_loss(u, x0, x1).item() == pytest.approx(eps**2, rel=1e-5)


def test_fm_loss_nonnegative_and_gradient():
    rng = np.random.default_rng(4)
    with T.use_dtype(np.float64):
        u = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        x0 = rng.standard_normal((3, 4))
        x1 = rng.standard_normal((3, 4))
        loss = flow.fm_loss(u, x0, x1)
        assert loss.item() >= 0
        loss.backward()
        expected = 2.0 * (u.data - (x1 - x0)) / u.size
        assert T.max_rel_error(u.grad, expected) < 1e-6


def test_one_step_constant_field():
    x0 = np.full((2, 3), 1.5, np.float32)
    c = 0.25
    out = flow.sample_one_step(lambda x, cond, t: np.full_like(x, c), x0, None, alpha=1.0)
    np.testing.assert_allclose(out, x0 + c, rtol=1e-6)
    out2 = flow.sample_one_step(lambda x, cond, t: np.full_like(x, c), x0, None, alpha=2.0)
    np.testing.assert_allclose(out2, (x0 + c) / 2.0, rtol=1e-6)


def _delta_target_field(target):
    def u_net(x, cond, t):
        return (target - x) / (1.0 - t)

    return u_net


def test_one_step_delta_target_oracle():
    # analytic velocity of the straight path to a fixed point recovers it exactly
    rng = np.random.default_rng(5)
    target = rng.standard_normal((1, 6)).astype(np.float32)
    x0 = rng.standard_normal((40, 6)).astype(np.float32)
    out = flow.sample_one_step(_delta_target_field(target), x0, None, alpha=1.0)
    assert np.abs(out - target).max() < 1e-6


@pytest.mark.parametrize("steps", [1, 3, 10, 50])
def test_euler_delta_target_any_steps(steps):
    rng = np.random.default_rng(6)
    target = rng.standard_normal((1, 4)).astype(np.float32)
    x0 = rng.standard_normal((20, 4)).astype(np.float32)
    out = flow.sample_euler(_delta_target_field(target), x0, None, steps, alpha=1.0)
    assert np.abs(out - target).max() < 1e-4


def test_euler_one_step_bitwise_matches_one_step():
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal((8, 5)).astype(np.float32)

    def u_net(x, cond, t):
        return np.sin(x).astype(x.dtype) * np.float32(0.3 + t)

    a = flow.sample_one_step(u_net, x0, None, alpha=1.7)
    b = flow.sample_euler(u_net, x0, None, steps=1, alpha=1.7)
    assert np.array_equal(a, b)


def test_sampler_validation():
    x0 = np.zeros((2, 2), np.float32)
    with pytest.raises(UsageError):
        flow.sample_one_step(lambda x, c, t: x, x0, None, alpha=0.0)
    with pytest.raises(UsageError):
        flow.sample_euler(lambda x, c, t: x, x0, None, steps=0, alpha=1.0)


def test_time_features_shape_and_continuity():
    d = 64
    f0 = flow.time_features(0.0, d)
    f1 = flow.time_features(1.0, d)
    assert f0.shape == (d,)
    assert np.linalg.norm(f1 - f0) > 0
    rng = np.random.default_rng(8)
    for t in rng.uniform(0, 1 - 1e-4, size=20):
        delta = flow.time_features(t + 1e-4, d) - flow.time_features(t, d)
        assert np.linalg.norm(delta) < 1e-2 * np.sqrt(d)


def test_time_features_validation():
    with pytest.raises(UsageError):
        flow.time_features(1.5, 8)
    with pytest.raises(UsageError):
        flow.time_features(0.5, 7)
