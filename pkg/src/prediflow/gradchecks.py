"""Float64 finite-difference verification of every layer and both models.

Runs at reduced dimensions and randomizes structurally-zero parameters so the
zero-initialized paths (modulation heads, output projections) are exercised.
The CLI's ``gradcheck`` command and the acceptance suite both call
``run_all``; anything above the 1e-4 relative tolerance is a failure.
"""

from __future__ import annotations

import numpy as np

from . import flow
from . import tensor as T
from .config import MotionDims, PredictorConfig, RefinerConfig
from .predictor import CoarsePredictor
from .refiner import InteractionRefiner, adaln_apply

TOLERANCE = 1e-4


def _layer_checks(rng) -> dict[str, float]:
    checks = {}

    def param(shape, scale=1.0):
        return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

    x = param((3, 5))
    w = param((5, 4))
    b = param((4,))
    checks["linear"] = max(T.gradcheck(
        lambda: T.tmean(T.mul(T.linear(x, w, b), T.linear(x, w, b))),
        {"x": x, "w": w, "b": b},
    ).values())

    x2 = param((4, 6))
    probe = param((6,))
    checks["layer_norm"] = max(T.gradcheck(
        lambda: T.tmean(T.mul(T.layer_norm(x2), probe)), {"x": x2, "p": probe}
    ).values())

    for name, fn in (("gelu", T.gelu), ("sigmoid", T.sigmoid), ("softmax", T.softmax)):
        xa = param((3, 7))
        pa = param((7,))
        checks[name] = max(T.gradcheck(
            lambda fn=fn, xa=xa, pa=pa: T.tmean(T.mul(fn(xa), pa)), {"x": xa, "p": pa}
        ).values())

    xt = param((4, 8))
    attn_params = {
        "x": xt,
        "wqkv": param((8, 24), 0.5),
        "bqkv": param((24,), 0.1),
        "wo": param((8, 8), 0.5),
        "bo": param((8,), 0.1),
    }
    checks["self_attention"] = max(T.gradcheck(
        lambda: T.tmean(T.mul(
            T.multi_head_attention(attn_params["x"], 2, attn_params["wqkv"],
                                   attn_params["bqkv"], attn_params["wo"], attn_params["bo"]),
            attn_params["x"])),
        attn_params,
    ).values())

    h = param((2, 4, 6))
    gamma = param((2, 1, 6), 0.3)
    beta = param((2, 1, 6), 0.3)
    checks["adaln_apply"] = max(T.gradcheck(
        lambda: T.tmean(T.mul(adaln_apply(h, gamma, beta), h)),
        {"h": h, "gamma": gamma, "beta": beta},
    ).values())

    u = param((2, 3, 4))
    x0 = rng.standard_normal((2, 3, 4))
    x1 = rng.standard_normal((2, 3, 4))
    checks["fm_loss"] = max(T.gradcheck(
        lambda: flow.fm_loss(u, x0, x1), {"u": u}
    ).values())
    # closed form: dL/du = 2 (u - (x1 - x0)) / numel
    loss = flow.fm_loss(u, x0, x1)
    loss.backward()
    expected = 2.0 * (u.data - (x1 - x0)) / u.size
    checks["fm_loss_closed_form"] = T.max_rel_error(u.grad, expected)
    return checks


def _randomize_zero_params(store, rng, scale=0.2):
    for t in store.tensors().values():
        if t.requires_grad and np.all(t.data == 0):
            t.data = rng.standard_normal(t.shape) * scale


def _refiner_checks(rng, sample: int | None) -> dict[str, float]:
    dims = MotionDims(T=4, F=8, tau=5)
    J, K = 2, 3
    rcfg = RefinerConfig(d=16, blocks=2, heads=2, mlp_ratio=2.0, se_reduction=4)
    model = InteractionRefiner(rcfg, dims, J, K, seed=11)
    _randomize_zero_params(model.store, rng)
    b = 2
    y = rng.standard_normal((b, 3 * J, dims.tau))
    init_flat = rng.standard_normal((b, 3 * J * dims.tau))
    hist_flat = rng.standard_normal((b, 3 * J * dims.tau))
    robot_flat = rng.standard_normal((b, 3 * K * dims.tau))
    t = rng.uniform(0, 1, b)
    x0 = rng.standard_normal(y.shape)
    x1 = rng.standard_normal(y.shape)

    def loss():
        return flow.fm_loss(model.forward(y, init_flat, hist_flat, robot_flat, t), x0, x1)

    errs = T.gradcheck(loss, model.store.trainable(), sample=sample, rng=rng)

    block_params = {k: v for k, v in model.store.trainable().items() if k.startswith("block0.")}
    tokens = T.Tensor(rng.standard_normal((b, model.n_tokens, rcfg.d)), requires_grad=True)
    c_r = T.Tensor(rng.standard_normal((b, rcfg.d)), requires_grad=True)
    block_errs = T.gradcheck(
        lambda: T.tmean(T.mul(model.block_forward(0, tokens, c_r),
                              model.block_forward(0, tokens, c_r))),
        {**block_params, "tokens": tokens, "c_r": c_r},
        sample=sample, rng=rng,
    )
    return {"refiner_full": max(errs.values()), "refiner_block": max(block_errs.values())}


def _predictor_checks(rng, sample: int | None) -> dict[str, float]:
    dims = MotionDims(T=4, F=8, tau=5)
    pcfg = PredictorConfig(latent=12, blocks=2, token_ratio=2.0, channel_ratio=2.0)
    model = CoarsePredictor(pcfg, dims, J=2, seed=13)
    _randomize_zero_params(model.store, rng)
    b = 2
    z = rng.standard_normal((b, 6, dims.tau))
    hist = rng.standard_normal((b, 6 * dims.tau))
    t = rng.uniform(0, 1, b)
    x0 = rng.standard_normal(z.shape)
    x1 = rng.standard_normal(z.shape)
    errs = T.gradcheck(
        lambda: flow.fm_loss(model.forward(z, hist, t), x0, x1),
        model.store.trainable(), sample=sample, rng=rng,
    )
    return {"predictor_full": max(errs.values())}


def run_all(sample: int | None = 4, seed: int = 0) -> dict[str, float]:
    """All gradient checks in float64; returns name -> max relative error.

    ``sample`` caps finite-difference probes per parameter tensor for the two
    full-model checks (layers are always swept exhaustively).
    """
    rng = np.random.default_rng(seed)
    results = {}
    with T.use_dtype(np.float64):
        results.update(_layer_checks(rng))
        results.update(_refiner_checks(rng, sample))
        results.update(_predictor_checks(rng, sample))
    return results
