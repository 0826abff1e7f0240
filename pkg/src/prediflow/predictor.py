"""Coarse predictor: a one-step conditional generator over motion coefficients.

Stands in for a frozen pretrained single-inference-step predictor.  The
network embeds the observed-history coefficients into one condition token,
embeds the noise coefficients into per-frequency tokens, and mixes the stack
with alternating token-axis / channel-axis MLP blocks.  It is trained as a
conditional flow-matching generator (straight path, velocity regression) over
whitened target coefficients and sampled with a single Euler step from t=0.
"""

from __future__ import annotations

import numpy as np

from . import flow
from . import tensor as T
from .checkpoint import read_checkpoint, write_checkpoint
from .config import MotionDims, PredictorConfig, PrediFlowConfig
from .dataset import window_samples
from .errors import DataError, DimensionError, NumericError
from .motion import dct_arr, idct_arr, pad_values
from .nn import LrSchedule, ParamStore, adam_step, compute_gradients, lr_at
from .seeding import (
    STREAM_PREDICTOR_EPOCH,
    STREAM_PREDICTOR_INIT,
    STREAM_PREDICTOR_SAMPLE,
    STREAM_VALIDATION,
    derive_rng,
)


class CoarsePredictor:
    def __init__(self, pcfg: PredictorConfig, dims: MotionDims, J: int,
                 seed: int = 0, store: ParamStore | None = None):
        self.cfg = pcfg
        self.dims = dims
        self.J = J
        self.D = 3 * J
        self.n_tokens = dims.tau + 1
        self.store = store if store is not None else ParamStore()
        if store is None:
            self._build(derive_rng(seed, STREAM_PREDICTOR_INIT))

    def _build(self, rng):
        s, d = self.store, self.cfg.latent
        tau, D = self.dims.tau, self.D
        n_tok = self.n_tokens
        th = max(int(round(self.cfg.token_ratio * n_tok)), 2)
        ch = max(int(round(self.cfg.channel_ratio * d)), 2)
        s.param("embed_hist.w", (D * tau, d), rng)
        s.param("embed_hist.b", (d,), rng, init="zeros")
        s.param("embed_noise.w", (D, d), rng)
        s.param("embed_noise.b", (d,), rng, init="zeros")
        s.param("time.w1", (d, d), rng)
        s.param("time.b1", (d,), rng, init="zeros")
        s.param("time.w2", (d, d), rng)
        s.param("time.b2", (d,), rng, init="zeros")
        s.add("pos", 0.02 * rng.standard_normal((n_tok, d)))
        for b in range(self.cfg.blocks):
            s.param(f"block{b}.tok.w1", (n_tok, th), rng)
            s.param(f"block{b}.tok.b1", (th,), rng, init="zeros")
            s.param(f"block{b}.tok.w2", (th, n_tok), rng)
            s.param(f"block{b}.tok.b2", (n_tok,), rng, init="zeros")
            s.param(f"block{b}.ch.w1", (d, ch), rng)
            s.param(f"block{b}.ch.b1", (ch,), rng, init="zeros")
            s.param(f"block{b}.ch.w2", (ch, d), rng)
            s.param(f"block{b}.ch.b2", (d,), rng, init="zeros")
        s.param("out.w", (d, D), rng)
        s.param("out.b", (D,), rng, init="zeros")
        s.buffer("norm.mu", np.zeros((D, tau)))
        s.buffer("norm.sd", np.ones((D, tau)))
        s.buffer("norm.hist_mu", np.zeros(D * tau))
        s.buffer("norm.hist_sd", np.ones(D * tau))

    # -- conditioning ----------------------------------------------------------
    def history_flat(self, obs_human: np.ndarray) -> np.ndarray:
        """Flat(DCT(pad(observation))); accepts (T, 3J) or a batch (b, T, 3J)."""
        if obs_human.shape[-2] != self.dims.T or obs_human.shape[-1] != self.D:
            raise DimensionError(
                f"observation must be (T={self.dims.T}, {self.D}), got {obs_human.shape}"
            )
        obs = obs_human.astype(self.store.dtype, copy=False)
        if obs.ndim == 2:
            padded = pad_values(obs, self.dims.F)
            return dct_arr(padded, self.dims.tau).reshape(-1)
        tail = np.repeat(obs[:, -1:, :], self.dims.F, axis=1)
        padded = np.concatenate([obs, tail], axis=1)
        return dct_arr(padded, self.dims.tau).reshape(obs.shape[0], -1)

    def embed_history(self, obs_human: np.ndarray) -> np.ndarray:
        """Condition token for one observation, shape (latent,)."""
        s = self.store
        flat = (self.history_flat(obs_human) - s["norm.hist_mu"].data) / s["norm.hist_sd"].data
        return flat @ s["embed_hist.w"].data + s["embed_hist.b"].data

    # -- network ------------------------------------------------------------------
    def forward(self, z, hist_flat: np.ndarray, t: np.ndarray) -> T.Tensor:
        """Velocity for noise coefficients z (b, 3J, tau) under condition/time."""
        s, d = self.store, self.cfg.latent
        dt = self.store.dtype
        if isinstance(z, np.ndarray):
            z = z.astype(dt, copy=False)
        hist_flat = (hist_flat.astype(dt, copy=False) - s["norm.hist_mu"].data) / s["norm.hist_sd"].data
        b = z.shape[0] if hasattr(z, "shape") else len(z)
        zt = T.swapaxes(T._as_tensor(z), -1, -2)                       # (b, tau, 3J)
        tok = T.linear(zt, s["embed_noise.w"], s["embed_noise.b"])     # (b, tau, d)
        cond = T.linear(T.Tensor(hist_flat), s["embed_hist.w"], s["embed_hist.b"])
        feats = flow.time_features(t, d).astype(self.store.dtype)
        temb = T.linear(T.gelu(T.linear(T.Tensor(feats), s["time.w1"], s["time.b1"])),
                        s["time.w2"], s["time.b2"])
        cond = T.add(cond, temb)                                       # (b, d)
        h = T.concat([tok, T.reshape(cond, (b, 1, d))], axis=1)
        h = T.add(h, s["pos"])
        for i in range(self.cfg.blocks):
            mixed = T.swapaxes(T.layer_norm(h), -1, -2)                # (b, d, n_tok)
            mixed = T.linear(mixed, s[f"block{i}.tok.w1"], s[f"block{i}.tok.b1"])
            mixed = T.gelu(mixed)
            mixed = T.linear(mixed, s[f"block{i}.tok.w2"], s[f"block{i}.tok.b2"])
            h = T.add(h, T.swapaxes(mixed, -1, -2))
            ff = T.linear(T.layer_norm(h), s[f"block{i}.ch.w1"], s[f"block{i}.ch.b1"])
            ff = T.gelu(ff)
            ff = T.linear(ff, s[f"block{i}.ch.w2"], s[f"block{i}.ch.b2"])
            h = T.add(h, ff)
        h = T.layer_norm(h)
        out = T.linear(T.slice_axis(h, 1, 0, self.dims.tau), s["out.w"], s["out.b"])
        return T.swapaxes(out, -1, -2)                                 # (b, 3J, tau)

    def velocity(self, z: np.ndarray, hist_flat: np.ndarray, t: float) -> np.ndarray:
        """Frozen-forward velocity field (numpy in, numpy out)."""
        tb = np.full(z.shape[0], t, dtype=np.float64)
        with T.no_grad():
            return self.forward(z, hist_flat, tb).data

    # -- sampling --------------------------------------------------------------------
    def predict_coarse(self, obs_human: np.ndarray, n: int, seed) -> np.ndarray:
        """n coarse coefficient predictions (n, 3J, tau), deterministic per seed."""
        if n < 1:
            raise DataError("need n >= 1 coarse samples")
        flat = self.history_flat(obs_human)
        rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, STREAM_PREDICTOR_SAMPLE)
        z0 = rng.standard_normal((n, self.D, self.dims.tau), dtype=np.float32)
        z0 = z0.astype(self.store.dtype, copy=False)
        return self.push_noise(flat, z0)

    def push_noise(self, hist_flat: np.ndarray, z0: np.ndarray) -> np.ndarray:
        """One-step generation from given source noise (batch)."""
        n = z0.shape[0]
        flats = np.broadcast_to(hist_flat, (n, hist_flat.shape[-1])) if hist_flat.ndim == 1 else hist_flat
        y_std = flow.sample_one_step(
            lambda x, cond, t: self.velocity(x, cond, t), z0, flats, alpha=1.0
        )
        mu = self.store["norm.mu"].data
        sd = self.store["norm.sd"].data
        return y_std * sd + mu

    def set_normalization(self, mu: np.ndarray, sd: np.ndarray,
                          hist_flats: np.ndarray | None = None):
        self.store["norm.mu"].data = mu.astype(self.store.dtype)
        self.store["norm.sd"].data = sd.astype(self.store.dtype)
        if hist_flats is not None:
            self.store["norm.hist_mu"].data = hist_flats.mean(axis=0).astype(self.store.dtype)
            self.store["norm.hist_sd"].data = np.maximum(
                hist_flats.std(axis=0), 1e-4).astype(self.store.dtype)

    # -- persistence --------------------------------------------------------------------
    def hyper(self) -> dict:
        return {
            "kind": "coarse_predictor",
            "latent": self.cfg.latent, "blocks": self.cfg.blocks,
            "token_ratio": self.cfg.token_ratio, "channel_ratio": self.cfg.channel_ratio,
            "T": self.dims.T, "F": self.dims.F, "tau": self.dims.tau, "J": self.J,
        }

    def save(self, path, extra: dict | None = None):
        meta = self.hyper()
        meta.update(extra or {})
        write_checkpoint(path, self.store.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> "CoarsePredictor":
        arrays, meta = read_checkpoint(path)
        if meta.get("kind") != "coarse_predictor":
            raise DataError(f"{path} is not a coarse-predictor checkpoint")
        pcfg = PredictorConfig(
            latent=meta["latent"], blocks=meta["blocks"],
            token_ratio=meta["token_ratio"], channel_ratio=meta["channel_ratio"],
        )
        dims = MotionDims(T=meta["T"], F=meta["F"], tau=meta["tau"])
        model = cls(pcfg, dims, meta["J"])
        model.store.load_arrays(arrays)
        return model


def prepare_training_arrays(trials, indices, dims: MotionDims, stride: int):
    """History flats and whole-sequence target coefficients for given trials."""
    windows = window_samples([trials[i] for i in indices], dims.T, dims.F, stride)
    if not windows:
        raise DataError("no training windows (trials too short?)")
    full = np.stack([w.full_human for w in windows]).astype(np.float32)      # (n, L, 3J)
    targets = dct_arr(full, dims.tau)                                        # (n, 3J, tau)
    obs = np.stack([w.obs_human for w in windows]).astype(np.float32)
    return windows, obs, targets


def best_of_ade(pred_futures: np.ndarray, gt_future: np.ndarray) -> float:
    """min over samples of mean-per-frame L2 pose distance."""
    d = np.linalg.norm(pred_futures - gt_future[None], axis=-1).mean(axis=-1)
    return float(d.min())


def train_predictor(trials, split, dims: MotionDims, pcfg: PredictorConfig,
                    tcfg: PrediFlowConfig, seed: int = 0, train_stride: int = 3,
                    eval_stride: int = 15, val_draws: int = 10, log=None):
    """Fit the coarse generator; returns (model, history).

    Model selection: best-of-``val_draws`` ADE on the validation split, fixed
    draw seed per epoch so the curves are comparable.
    """
    model = CoarsePredictor(pcfg, dims, J=trials[0].human.dims // 3, seed=seed)
    windows, obs, targets = prepare_training_arrays(trials, split.train, dims, train_stride)
    mu = targets.mean(axis=0)
    sd = np.maximum(targets.std(axis=0), 1e-4)
    hist_flats = model.history_flat(obs)
    model.set_normalization(mu, sd, hist_flats)
    targets_std = ((targets - mu) / sd).astype(np.float32)

    val_windows = window_samples([trials[i] for i in split.val], dims.T, dims.F, eval_stride)
    if not val_windows:
        raise DataError("validation split produced no windows")
    val_flats = model.history_flat(np.stack([w.obs_human for w in val_windows]))
    val_futures = [w.fut_human for w in val_windows]

    sched = LrSchedule(lr_init=tcfg.lr_init, warmup_epochs=tcfg.warmup_epochs,
                       max_epochs=tcfg.epochs)
    n = targets_std.shape[0]
    history = {"train_loss": [], "val_ade": []}
    best = {"ade": np.inf, "arrays": None, "epoch": -1}

    for epoch in range(tcfg.epochs):
        rng = derive_rng(seed, STREAM_PREDICTOR_EPOCH, epoch)
        order = rng.integers(0, n, size=tcfg.samples_per_epoch)
        lr = lr_at(sched, epoch)
        losses = []
        for lo in range(0, len(order), tcfg.batch):
            idx = order[lo:lo + tcfg.batch]
            x1 = targets_std[idx]
            z0 = rng.standard_normal(x1.shape, dtype=np.float32)
            t = rng.uniform(0.0, 1.0, size=len(idx))
            xt = flow.interpolate(z0, x1, t.astype(np.float32))
            u = model.forward(xt, hist_flats[idx], t)
            loss = flow.fm_loss(u, z0, x1)
            val = loss.item()
            if not np.isfinite(val):
                raise NumericError(f"predictor training diverged at epoch {epoch}")
            losses.append(val)
            compute_gradients(loss, model.store)
            adam_step(model.store, lr)
        history["train_loss"].append(float(np.mean(losses)))

        val_ade = _validate(model, val_windows, val_flats, val_futures, dims, val_draws, seed)
        history["val_ade"].append(val_ade)
        if val_ade < best["ade"]:
            best = {"ade": val_ade,
                    "arrays": {k: v.copy() for k, v in model.store.state_arrays().items()},
                    "epoch": epoch}
        if log:
            log(f"predictor epoch {epoch}: loss {history['train_loss'][-1]:.4f} "
                f"val best-of-{val_draws} ADE {val_ade:.4f}")

    if best["arrays"] is not None:
        model.store.load_arrays(best["arrays"])
    history["best_epoch"] = best["epoch"]
    history["best_val_ade"] = best["ade"]
    return model, history


def _validate(model, val_windows, val_flats, val_futures, dims, draws, seed) -> float:
    rng = derive_rng(seed, STREAM_VALIDATION, 0)
    n_win = len(val_windows)
    z0 = rng.standard_normal((n_win * draws, model.D, dims.tau), dtype=np.float32)
    flats = np.repeat(val_flats, draws, axis=0)
    coeffs = model.push_noise(flats, z0)
    motions = idct_arr(coeffs, dims.L)[:, dims.T:, :]
    total = 0.0
    for i in range(n_win):
        total += best_of_ade(motions[i * draws:(i + 1) * draws], val_futures[i])
    return total / n_win
