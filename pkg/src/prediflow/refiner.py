"""Interaction-aware velocity network for residual refinement.

Token stream: tau noise tokens (one per retained frequency) plus single-token
embeddings of the observed human motion and of the coarse prediction, both
with flow-time injection.  The observed robot motion is deliberately kept out
of the token stream: it enters every block through adaptive layer norm —
per-dimension scale/shift after each norm and a gate before each residual
add, all regressed from the robot condition and zero-initialized, so a fresh
refiner is exactly the zero velocity field.  Blocks are transformer blocks
with squeeze-and-excitation channel gating in the MLP path; the deeper half
of the stack receives concatenation skips from mirrored shallow blocks.
"""

from __future__ import annotations

import numpy as np

from . import flow
from . import tensor as T
from .checkpoint import read_checkpoint, write_checkpoint
from .config import MotionDims, RefinerConfig
from .errors import DataError, DimensionError
from .motion import dct_arr, pad_values
from .nn import ParamStore
from .seeding import STREAM_REFINER_INIT, derive_rng


def adaln_apply(h, gamma, beta, eps: float = 1e-5):
    """LN(h) * (1 + gamma) + beta, modulation broadcast over tokens."""
    normed = T.layer_norm(h, eps)
    return T.add(T.mul(normed, T.add_const(gamma, 1.0)), beta)


def _silu(x):
    return T.mul(x, T.sigmoid(x))


class InteractionRefiner:
    def __init__(self, rcfg: RefinerConfig, dims: MotionDims, J: int, K: int,
                 seed: int = 0, store: ParamStore | None = None,
                 use_robot: bool = True):
        self.cfg = rcfg
        self.dims = dims
        self.J, self.K = J, K
        self.D = 3 * J
        self.n_tokens = dims.tau + 2
        self.use_robot = use_robot
        self.skip_from = {
            b: rcfg.blocks - 1 - b
            for b in range((rcfg.blocks + 1) // 2, rcfg.blocks)
            if rcfg.blocks - 1 - b >= 0 and rcfg.blocks - 1 - b < b
        }
        self.store = store if store is not None else ParamStore()
        if store is None:
            self._build(derive_rng(seed, STREAM_REFINER_INIT))

    def _build(self, rng):
        s, d = self.store, self.cfg.d
        tau, D = self.dims.tau, self.D
        hidden = max(int(round(self.cfg.mlp_ratio * d)), 2)
        se_dim = max(d // self.cfg.se_reduction, 1)
        s.param("embed_hist.w", (D * tau, d), rng)
        s.param("embed_hist.b", (d,), rng, init="zeros")
        s.param("embed_init.w", (D * tau, d), rng)
        s.param("embed_init.b", (d,), rng, init="zeros")
        s.param("embed_robot.w", (3 * self.K * tau, d), rng)
        s.param("embed_robot.b", (d,), rng, init="zeros")
        s.param("embed_noise.w", (D, d), rng)
        s.param("embed_noise.b", (d,), rng, init="zeros")
        s.param("time.w1", (d, d), rng)
        s.param("time.b1", (d,), rng, init="zeros")
        s.param("time.w2", (d, d), rng)
        s.param("time.b2", (d,), rng, init="zeros")
        s.add("pos", 0.02 * rng.standard_normal((self.n_tokens, d)))
        for b in range(self.cfg.blocks):
            s.param(f"block{b}.attn.wqkv", (d, 3 * d), rng)
            s.param(f"block{b}.attn.bqkv", (3 * d,), rng, init="zeros")
            s.param(f"block{b}.attn.wo", (d, d), rng)
            s.param(f"block{b}.attn.bo", (d,), rng, init="zeros")
            s.param(f"block{b}.mlp.w1", (d, hidden), rng)
            s.param(f"block{b}.mlp.b1", (hidden,), rng, init="zeros")
            s.param(f"block{b}.mlp.w2", (hidden, d), rng)
            s.param(f"block{b}.mlp.b2", (d,), rng, init="zeros")
            s.param(f"block{b}.se.w1", (d, se_dim), rng)
            s.param(f"block{b}.se.b1", (se_dim,), rng, init="zeros")
            s.param(f"block{b}.se.w2", (se_dim, d), rng)
            s.param(f"block{b}.se.b2", (d,), rng, init="zeros")
            # adaLN-Zero: modulation heads start at exactly zero
            s.param(f"block{b}.mod.w", (d, 6 * d), rng, init="zeros")
            s.param(f"block{b}.mod.b", (6 * d,), rng, init="zeros")
            if b in self.skip_from:
                fuse = np.concatenate([np.eye(d), np.zeros((d, d))], axis=0)
                s.add(f"block{b}.fuse.w", fuse)
                s.param(f"block{b}.fuse.b", (d,), rng, init="zeros")
        # zero-initialized output projection: fresh model = zero velocity field
        s.param("out.w", (d, D), rng, init="zeros")
        s.param("out.b", (D,), rng, init="zeros")
        # condition whitening: raw DCT flats mix ~10 m DC terms with ~mm details
        for name, dim in (("hist", D * tau), ("init", D * tau), ("robot", 3 * self.K * tau)):
            s.buffer(f"norm.{name}_mu", np.zeros(dim))
            s.buffer(f"norm.{name}_sd", np.ones(dim))

    # -- condition embeddings ------------------------------------------------
    def _flat(self, obs: np.ndarray, expected_dims: int) -> np.ndarray:
        if obs.shape[-2] != self.dims.T or obs.shape[-1] != expected_dims:
            raise DimensionError(
                f"observation must be (T={self.dims.T}, {expected_dims}), got {obs.shape}"
            )
        obs = obs.astype(self.store.dtype, copy=False)
        if obs.ndim == 2:
            return dct_arr(pad_values(obs, self.dims.F), self.dims.tau).reshape(-1)
        tail = np.repeat(obs[:, -1:, :], self.dims.F, axis=1)
        return dct_arr(np.concatenate([obs, tail], axis=1), self.dims.tau).reshape(obs.shape[0], -1)

    def human_flat(self, obs_human: np.ndarray) -> np.ndarray:
        return self._flat(obs_human, self.D)

    def robot_flat(self, obs_robot: np.ndarray) -> np.ndarray:
        return self._flat(obs_robot, 3 * self.K)

    def _whiten(self, name: str, flat: np.ndarray) -> np.ndarray:
        mu = self.store[f"norm.{name}_mu"].data
        sd = self.store[f"norm.{name}_sd"].data
        return (flat - mu) / sd

    def set_condition_stats(self, hist_flats: np.ndarray, init_flats: np.ndarray,
                            robot_flats: np.ndarray):
        """Fit the condition-whitening buffers from training-set flats."""
        for name, flats in (("hist", hist_flats), ("init", init_flats), ("robot", robot_flats)):
            self.store[f"norm.{name}_mu"].data = flats.mean(axis=0).astype(self.store.dtype)
            self.store[f"norm.{name}_sd"].data = np.maximum(
                flats.std(axis=0), 1e-4).astype(self.store.dtype)

    def embed_robot(self, obs_robot: np.ndarray) -> np.ndarray:
        """Robot condition token (d,); a constant token when robot
        conditioning is ablated."""
        flat = self._whiten("robot", self.robot_flat(obs_robot))
        if not self.use_robot:
            flat = np.zeros_like(flat)
        s = self.store
        return flat @ s["embed_robot.w"].data + s["embed_robot.b"].data

    def embed_init(self, init_coeffs: np.ndarray) -> np.ndarray:
        """Coarse-prediction condition token (d,)."""
        flat = init_coeffs.reshape(-1).astype(self.store.dtype, copy=False)
        s = self.store
        return self._whiten("init", flat) @ s["embed_init.w"].data + s["embed_init.b"].data

    def time_embed(self, t: float) -> np.ndarray:
        """Flow-time embedding (d,), added to the human-related tokens only."""
        s = self.store
        feats = flow.time_features(t, self.cfg.d).astype(self.store.dtype)
        with T.no_grad():
            h = T.linear(T.Tensor(feats), s["time.w1"], s["time.b1"])
            out = T.linear(T.gelu(h), s["time.w2"], s["time.b2"])
        return out.data

    # -- blocks -----------------------------------------------------------------
    def _modulation(self, b: int, robot_token):
        s, d = self.store, self.cfg.d
        mods = T.linear(_silu(robot_token), s[f"block{b}.mod.w"], s[f"block{b}.mod.b"])
        parts = []
        for i in range(6):
            part = T.slice_axis(mods, mods.ndim - 1, i * d, (i + 1) * d)
            if part.ndim == 2:
                part = T.reshape(part, (part.shape[0], 1, d))
            parts.append(part)
        return parts  # gamma1, beta1, gate1, gamma2, beta2, gate2

    def block_forward(self, b: int, h, robot_token, force_zero_gates: bool = False):
        """One interaction-aware SE-transformer block.

        h: (batch, n_tokens, d) Tensor; robot_token: (batch, d) Tensor.
        """
        s = self.store
        g1m, b1m, gate1, g2m, b2m, gate2 = self._modulation(b, robot_token)
        if force_zero_gates:
            gate1 = T.scale(gate1, 0.0)
            gate2 = T.scale(gate2, 0.0)
        attn_in = adaln_apply(h, g1m, b1m)
        attn_out = T.multi_head_attention(
            attn_in, self.cfg.heads,
            s[f"block{b}.attn.wqkv"], s[f"block{b}.attn.bqkv"],
            s[f"block{b}.attn.wo"], s[f"block{b}.attn.bo"],
        )
        h = T.add(h, T.mul(gate1, attn_out))
        mlp_in = adaln_apply(h, g2m, b2m)
        u = T.gelu(T.linear(mlp_in, s[f"block{b}.mlp.w1"], s[f"block{b}.mlp.b1"]))
        u = T.linear(u, s[f"block{b}.mlp.w2"], s[f"block{b}.mlp.b2"])
        # squeeze-and-excitation: channel gate from the token-pooled features
        z = T.tmean(u, axis=u.ndim - 2)
        gate = T.sigmoid(T.linear(T.gelu(T.linear(z, s[f"block{b}.se.w1"], s[f"block{b}.se.b1"])),
                                  s[f"block{b}.se.w2"], s[f"block{b}.se.b2"]))
        if gate.ndim == 2:
            gate = T.reshape(gate, (gate.shape[0], 1, self.cfg.d))
        u = T.mul(u, gate)
        return T.add(h, T.mul(gate2, u))

    # -- full network ----------------------------------------------------------------
    def forward(self, y_t, init_flat: np.ndarray, hist_flat: np.ndarray,
                robot_flat: np.ndarray, t: np.ndarray) -> T.Tensor:
        """Velocity for noisy residual y_t (b, 3J, tau); conditions are flats."""
        s, d = self.store, self.cfg.d
        dt = self.store.dtype
        if isinstance(y_t, np.ndarray):
            y_t = y_t.astype(dt, copy=False)
        init_flat = self._whiten("init", init_flat.astype(dt, copy=False))
        hist_flat = self._whiten("hist", hist_flat.astype(dt, copy=False))
        robot_flat = self._whiten("robot", robot_flat.astype(dt, copy=False))
        b = y_t.shape[0]
        if not self.use_robot:
            robot_flat = np.zeros_like(robot_flat)

        tok = T.linear(T.swapaxes(T._as_tensor(y_t), -1, -2),
                       s["embed_noise.w"], s["embed_noise.b"])        # (b, tau, d)
        feats = flow.time_features(t, d).astype(self.store.dtype)
        temb = T.linear(T.gelu(T.linear(T.Tensor(feats), s["time.w1"], s["time.b1"])),
                        s["time.w2"], s["time.b2"])                   # (b, d)
        c_h = T.add(T.linear(T.Tensor(hist_flat), s["embed_hist.w"], s["embed_hist.b"]), temb)
        c_i = T.add(T.linear(T.Tensor(init_flat), s["embed_init.w"], s["embed_init.b"]), temb)
        c_r = T.linear(T.Tensor(robot_flat), s["embed_robot.w"], s["embed_robot.b"])

        h = T.concat([tok,
                      T.reshape(c_h, (b, 1, d)),
                      T.reshape(c_i, (b, 1, d))], axis=1)
        h = T.add(h, s["pos"])

        streams = []
        for blk in range(self.cfg.blocks):
            if blk in self.skip_from:
                fused = T.concat([h, streams[self.skip_from[blk]]], axis=2)
                h = T.linear(fused, s[f"block{blk}.fuse.w"], s[f"block{blk}.fuse.b"])
            h = self.block_forward(blk, h, c_r)
            streams.append(h)

        out = T.linear(T.slice_axis(h, 1, 0, self.dims.tau), s["out.w"], s["out.b"])
        return T.swapaxes(out, -1, -2)                                # (b, 3J, tau)

    def velocity(self, y: np.ndarray, conditions, t: float) -> np.ndarray:
        """Frozen-forward velocity; ``conditions`` is (init_flat, hist_flat, robot_flat)."""
        init_flat, hist_flat, robot_flat = conditions
        tb = np.full(y.shape[0], t, dtype=np.float64)
        with T.no_grad():
            return self.forward(y, init_flat, hist_flat, robot_flat, tb).data

    # -- persistence --------------------------------------------------------------------
    def hyper(self) -> dict:
        return {
            "kind": "interaction_refiner",
            "d": self.cfg.d, "blocks": self.cfg.blocks, "heads": self.cfg.heads,
            "mlp_ratio": self.cfg.mlp_ratio, "se_reduction": self.cfg.se_reduction,
            "T": self.dims.T, "F": self.dims.F, "tau": self.dims.tau,
            "J": self.J, "K": self.K, "use_robot": self.use_robot,
        }

    def save(self, path, extra: dict | None = None):
        meta = self.hyper()
        meta.update(extra or {})
        write_checkpoint(path, self.store.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple["InteractionRefiner", dict]:
        arrays, meta = read_checkpoint(path)
        if meta.get("kind") != "interaction_refiner":
            raise DataError(f"{path} is not a refiner checkpoint")
        rcfg = RefinerConfig(d=meta["d"], blocks=meta["blocks"], heads=meta["heads"],
                             mlp_ratio=meta["mlp_ratio"], se_reduction=meta["se_reduction"])
        dims = MotionDims(T=meta["T"], F=meta["F"], tau=meta["tau"])
        model = cls(rcfg, dims, meta["J"], meta["K"], use_robot=meta.get("use_robot", True))
        model.store.load_arrays(arrays)
        return model, meta
