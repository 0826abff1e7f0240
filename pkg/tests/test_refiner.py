"""Refiner structure: zero-init contract, AdaLN, block identity, conditioning."""

import numpy as np
import pytest

from prediflow import tensor as T
from prediflow.config import MotionDims, RefinerConfig
from prediflow.errors import UsageError
from prediflow.refiner import InteractionRefiner, adaln_apply


DIMS = MotionDims(T=6, F=10, tau=4)
J, K = 2, 3


@pytest.fixture()
def model():
    return InteractionRefiner(RefinerConfig(d=16, blocks=4, heads=2), DIMS, J, K, seed=0)


def rand_inputs(rng, b=3):
    return (
        rng.standard_normal((b, 3 * J, DIMS.tau)).astype(np.float32),
        rng.standard_normal((b, 3 * J * DIMS.tau)).astype(np.float32),
        rng.standard_normal((b, 3 * J * DIMS.tau)).astype(np.float32),
        rng.standard_normal((b, 3 * K * DIMS.tau)).astype(np.float32),
        rng.uniform(0, 1, b),
    )


def test_fresh_model_is_exact_zero_field(model):
    rng = np.random.default_rng(0)
    y, init_flat, hist_flat, robot_flat, t = rand_inputs(rng)
    out = model.velocity(y, (init_flat, hist_flat, robot_flat), 0.5)
    assert out.shape == (3, 3 * J, DIMS.tau)
    assert np.all(out == 0.0)


def test_modulation_params_start_at_zero(model):
    for b in range(model.cfg.blocks):
        assert np.all(model.store[f"block{b}.mod.w"].data == 0)
        assert np.all(model.store[f"block{b}.mod.b"].data == 0)


def test_block_identity_with_zero_gates(model):
    rng = np.random.default_rng(1)
    # randomize modulation heads so gates would be nonzero without forcing
    for b in range(model.cfg.blocks):
        model.store[f"block{b}.mod.w"].data = rng.standard_normal(
            model.store[f"block{b}.mod.w"].shape).astype(np.float32) * 0.3
    tokens = T.Tensor(rng.standard_normal((2, model.n_tokens, 16)).astype(np.float32))
    c_r = T.Tensor(rng.standard_normal((2, 16)).astype(np.float32))
    with T.no_grad():
        forced = model.block_forward(0, tokens, c_r, force_zero_gates=True)
        free = model.block_forward(0, tokens, c_r)
    np.testing.assert_array_equal(forced.data, tokens.data)
    assert np.abs(free.data - tokens.data).max() > 0


def test_adaln_zero_modulation_is_plain_layernorm():
    rng = np.random.default_rng(2)
    h = T.Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32))
    zero = T.Tensor(np.zeros((2, 1, 8), np.float32))
    out = adaln_apply(h, zero, zero)
    np.testing.assert_allclose(out.data, T.layer_norm(h).data, atol=1e-7)


def test_adaln_gamma_minus_one_broadcasts_beta():
    rng = np.random.default_rng(3)
    h = T.Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32))
    gamma = T.Tensor(np.full((2, 1, 8), -1.0, np.float32))
    beta = T.Tensor(rng.standard_normal((2, 1, 8)).astype(np.float32))
    out = adaln_apply(h, gamma, beta)
    expected = np.broadcast_to(beta.data, out.shape)
    np.testing.assert_allclose(out.data, expected, atol=1e-6)


def test_robot_condition_changes_output_after_head_randomization(model):
    rng = np.random.default_rng(4)
    for b in range(model.cfg.blocks):
        model.store[f"block{b}.mod.w"].data = rng.standard_normal(
            model.store[f"block{b}.mod.w"].shape).astype(np.float32) * 0.3
    model.store["out.w"].data = rng.standard_normal(
        model.store["out.w"].shape).astype(np.float32) * 0.3
    y, init_flat, hist_flat, robot_flat, t = rand_inputs(rng)
    out_a = model.velocity(y, (init_flat, hist_flat, robot_flat), 0.0)
    robot_b = rng.standard_normal(robot_flat.shape).astype(np.float32)
    out_b = model.velocity(y, (init_flat, hist_flat, robot_b), 0.0)
    assert np.abs(out_a - out_b).max() > 1e-6


def test_constant_robot_token_ablation(model):
    rng = np.random.default_rng(5)
    ablated = InteractionRefiner(RefinerConfig(d=16, blocks=2, heads=2), DIMS, J, K,
                                 seed=0, use_robot=False)
    obs_r1 = rng.standard_normal((DIMS.T, 3 * K)).astype(np.float32)
    obs_r2 = rng.standard_normal((DIMS.T, 3 * K)).astype(np.float32)
    np.testing.assert_array_equal(ablated.embed_robot(obs_r1), ablated.embed_robot(obs_r2))
    assert np.abs(model.embed_robot(obs_r1) - model.embed_robot(obs_r2)).max() > 0


def test_embed_tokens_shape_and_determinism(model):
    rng = np.random.default_rng(6)
    obs_r = rng.standard_normal((DIMS.T, 3 * K)).astype(np.float32)
    tok = model.embed_robot(obs_r)
    assert tok.shape == (16,)
    np.testing.assert_array_equal(tok, model.embed_robot(obs_r))
    init = rng.standard_normal((3 * J, DIMS.tau)).astype(np.float32)
    init_tok = model.embed_init(init)
    assert init_tok.shape == (16,)
    other = model.embed_init(rng.standard_normal((3 * J, DIMS.tau)).astype(np.float32))
    assert np.abs(init_tok - other).max() > 0


def test_robot_padding_uses_only_observed_frames(model):
    rng = np.random.default_rng(7)
    obs = rng.standard_normal((DIMS.T, 3 * K)).astype(np.float32)
    np.testing.assert_array_equal(model.robot_flat(obs), model.robot_flat(obs.copy()))


def test_time_embed_contract(model):
    e0 = model.time_embed(0.0)
    e1 = model.time_embed(1.0)
    assert e0.shape == (16,)
    assert np.linalg.norm(e1 - e0) > 0
    with pytest.raises(UsageError):
        model.time_embed(1.5)


def test_forward_output_shape(model):
    rng = np.random.default_rng(8)
    y, init_flat, hist_flat, robot_flat, t = rand_inputs(rng, b=5)
    with T.no_grad():
        out = model.forward(y, init_flat, hist_flat, robot_flat, t)
    assert out.shape == (5, 3 * J, DIMS.tau)


def test_skip_wiring_mirrors_shallow_blocks():
    m4 = InteractionRefiner(RefinerConfig(d=16, blocks=4, heads=2), DIMS, J, K, seed=0)
    assert m4.skip_from == {2: 1, 3: 0}
    m7 = InteractionRefiner(RefinerConfig(d=16, blocks=7, heads=2), DIMS, J, K, seed=0)
    assert m7.skip_from == {4: 2, 5: 1, 6: 0}
    # fuse layers start as [I; 0]: skips do not perturb a fresh forward
    rng = np.random.default_rng(9)
    y, init_flat, hist_flat, robot_flat, t = rand_inputs(rng)
    out = m7.velocity(y, (init_flat, hist_flat, robot_flat), 0.3)
    assert np.all(out == 0.0)


def test_checkpoint_roundtrip(tmp_path, model):
    rng = np.random.default_rng(10)
    for name, t in model.store.tensors().items():
        if t.requires_grad:
            t.data = rng.standard_normal(t.shape).astype(np.float32) * 0.1
    path = tmp_path / "refiner.pfck"
    model.save(path, {"alpha": 2.5})
    loaded, meta = InteractionRefiner.load(path)
    assert meta["alpha"] == 2.5
    y, init_flat, hist_flat, robot_flat, t = rand_inputs(np.random.default_rng(11))
    np.testing.assert_array_equal(
        model.velocity(y, (init_flat, hist_flat, robot_flat), 0.25),
        loaded.velocity(y, (init_flat, hist_flat, robot_flat), 0.25),
    )
