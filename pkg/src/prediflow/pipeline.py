"""Training and inference orchestration for the prediction-refinement stack.

Training (refiner): per step, sample a window, draw one coarse prediction from
the frozen predictor, form the alpha-scaled residual target, pick t ~ U[0,1]
and a normal source sample, and regress the straight-path velocity.  The
coarse model's parameters never receive gradients.

Inference: embed the observation once, draw N coarse predictions, then M
residual samples per coarse prediction with a single unit Euler step at t=0
(all N*M refiner evaluations batched in one forward), divide by alpha, and
aggregate either the mean residual (robust) or every individual residual
(full stochasticity).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flow
from .checkpoint import read_checkpoint, write_checkpoint
from .config import MotionDims, PrediFlowConfig, RefinerConfig
from .dataset import window_samples
from .errors import DataError, NumericError, UsageError
from .motion import idct_arr
from .nn import LrSchedule, adam_step, compute_gradients, lr_at
from .predictor import CoarsePredictor, prepare_training_arrays
from .refiner import InteractionRefiner
from .seeding import (
    STREAM_ALPHA,
    STREAM_PREDICTOR_SAMPLE,
    STREAM_REFINER_EPOCH,
    STREAM_RESIDUAL_SAMPLE,
    STREAM_VALIDATION,
    derive_rng,
)


@dataclass
class PredictionSet:
    """Everything one inference call produces, before metric computation."""

    coarse: np.ndarray          # (N, 3J, tau) coefficient predictions
    residuals: np.ndarray       # (N, M, 3J, tau) sampled residuals
    final_coeffs: np.ndarray    # (N, ...) for mean agg, (N*M, ...) for all
    motions: np.ndarray         # (len(final_coeffs), L, 3J) time-domain
    agg: str

    def futures(self, T: int) -> np.ndarray:
        return self.motions[:, T:, :]


def estimate_alpha(windows, predictor: CoarsePredictor, targets: np.ndarray,
                   hist_flats: np.ndarray, sample_count: int, seed: int = 0,
                   salt: int = 0) -> float:
    """1 / pooled std of coarse-prediction residuals over sampled windows.

    One coarse draw per sampled window; ``salt`` selects a disjoint resample
    stream (used by the stability check).
    """
    if sample_count < 1000:
        raise UsageError("alpha estimation needs sample_count >= 1000")
    if len(windows) == 0:
        raise DataError("no windows for alpha estimation")
    if predictor.store.has_grads():
        raise UsageError("predictor must be frozen for alpha estimation")
    rng = derive_rng(seed, STREAM_ALPHA, salt)
    idx = rng.integers(0, len(windows), size=sample_count)
    z0 = rng.standard_normal((sample_count,) + targets.shape[1:], dtype=np.float32)
    coarse = predictor.push_noise(hist_flats[idx], z0)
    delta = targets[idx] - coarse
    std = float(delta.std())
    if std < 1e-12:
        raise DataError("degenerate residuals: pooled std is zero")
    return 1.0 / std


def _flats_for(refiner: InteractionRefiner, windows) -> tuple[np.ndarray, np.ndarray]:
    obs_h = np.stack([w.obs_human for w in windows]).astype(np.float32)
    obs_r = np.stack([w.obs_robot for w in windows]).astype(np.float32)
    return refiner.human_flat(obs_h), refiner.robot_flat(obs_r)


def train_refiner(trials, split, predictor: CoarsePredictor, refiner: InteractionRefiner,
                  tcfg: PrediFlowConfig, seed: int = 0, alpha: float | None = None,
                  train_stride: int = 3, eval_stride: int = 15, log=None,
                  stop_after_epoch: int | None = None, state: dict | None = None):
    """Fit the residual refiner against a frozen coarse predictor.

    Returns (refiner, state).  ``state`` carries alpha, per-epoch history and
    the best-validation parameter snapshot; pass it back in (with the same
    seed/config) to resume bit-identically at an epoch boundary.
    """
    if predictor.store.has_grads():
        raise UsageError("predictor must be frozen (it has gradient entries)")
    frozen_before = predictor.store.fingerprint()

    dims = refiner.dims
    windows, obs, targets = prepare_training_arrays(trials, split.train, dims, train_stride)
    hist_flats = predictor.history_flat(obs)
    robot_flats = refiner.robot_flat(
        np.stack([w.obs_robot for w in windows]).astype(np.float32)
    )
    if state is None:
        refiner.set_condition_stats(hist_flats, targets.reshape(targets.shape[0], -1),
                                    robot_flats)

    if state is None:
        if alpha is None:
            alpha = estimate_alpha(windows, predictor, targets, hist_flats,
                                   sample_count=max(1000, min(4 * len(windows), 5000)),
                                   seed=seed)
        state = {
            "alpha": float(alpha),
            "next_epoch": 0,
            "history": {"train_loss": [], "val_ade_median": []},
            "best_ade": float("inf"),
            "best_epoch": -1,
            "best_arrays": None,
        }
    alpha = state["alpha"]

    val_windows = window_samples([trials[i] for i in split.val], dims.T, dims.F, eval_stride)
    if not val_windows:
        raise DataError("validation split produced no windows")
    val_hist, val_robot = _flats_for(refiner, val_windows)
    val_hist_p = predictor.history_flat(np.stack([w.obs_human for w in val_windows]))
    val_futures = np.stack([w.fut_human for w in val_windows])

    sched = LrSchedule(lr_init=tcfg.lr_init, warmup_epochs=tcfg.warmup_epochs,
                       max_epochs=tcfg.epochs)
    n = targets.shape[0]
    last_epoch = tcfg.epochs if stop_after_epoch is None else min(stop_after_epoch, tcfg.epochs)

    for epoch in range(state["next_epoch"], last_epoch):
        rng = derive_rng(seed, STREAM_REFINER_EPOCH, epoch)
        order = rng.integers(0, n, size=tcfg.samples_per_epoch)
        lr = lr_at(sched, epoch)
        losses = []
        for lo in range(0, len(order), tcfg.batch):
            idx = order[lo:lo + tcfg.batch]
            bsz = len(idx)
            zc = rng.standard_normal((bsz,) + targets.shape[1:], dtype=np.float32)
            coarse = predictor.push_noise(hist_flats[idx], zc)
            x1 = (alpha * (targets[idx] - coarse)).astype(np.float32)
            y0 = rng.standard_normal(x1.shape, dtype=np.float32)
            t = rng.uniform(0.0, 1.0, size=bsz)
            yt = flow.interpolate(y0, x1, t.astype(np.float32))
            u = refiner.forward(yt, coarse.reshape(bsz, -1), hist_flats[idx],
                                robot_flats[idx], t)
            loss = flow.fm_loss(u, y0, x1)
            val = loss.item()
            if not np.isfinite(val):
                raise NumericError(
                    f"refiner training diverged at epoch {epoch} (loss={val}); "
                    f"lr={lr:.2e}, alpha={alpha:.3f}"
                )
            losses.append(val)
            compute_gradients(loss, refiner.store)
            adam_step(refiner.store, lr)
        state["history"]["train_loss"].append(float(np.mean(losses)))

        val_ade = _validate_median_ade(predictor, refiner, val_windows, val_hist_p,
                                       val_hist, val_robot, val_futures, alpha, seed)
        state["history"]["val_ade_median"].append(val_ade)
        if val_ade < state["best_ade"]:
            state["best_ade"] = val_ade
            state["best_epoch"] = epoch
            state["best_arrays"] = {k: v.copy() for k, v in refiner.store.state_arrays().items()}
        state["next_epoch"] = epoch + 1
        if log:
            log(f"refiner epoch {epoch}: loss {state['history']['train_loss'][-1]:.4f} "
                f"val median ADE {val_ade:.4f} (best {state['best_ade']:.4f})")

    if state["next_epoch"] >= tcfg.epochs and state["best_arrays"] is not None:
        refiner.store.load_arrays(state["best_arrays"])

    if predictor.store.fingerprint() != frozen_before:
        raise UsageError("predictor parameters changed during refiner training")
    if predictor.store.has_grads():
        raise UsageError("predictor grew gradient entries during refiner training")
    return refiner, state


def _validate_median_ade(predictor, refiner, val_windows, val_hist_p, val_hist,
                         val_robot, val_futures, alpha, seed,
                         N: int = 10, M: int = 10) -> float:
    dims = refiner.dims
    total = 0.0
    for i in range(len(val_windows)):
        pred_set = infer_from_flats(
            val_hist_p[i], val_hist[i], val_robot[i], predictor, refiner,
            PrediFlowConfig(N=N, M=M, agg="mean", alpha=alpha),
            seed=_window_seed(seed, STREAM_VALIDATION, i),
        )
        d = np.linalg.norm(pred_set.futures(dims.T) - val_futures[i][None], axis=-1).mean(axis=-1)
        total += float(np.median(d))
    return total / len(val_windows)


def _window_seed(seed: int, stream: int, index: int) -> int:
    # fold (seed, stream, index) into one integer key for derive_rng
    return ((int(seed) * 1_000_003 + int(stream)) * 1_000_003 + int(index)) & 0x7FFFFFFFFFFFFFFF


def infer(obs_human: np.ndarray, obs_robot: np.ndarray, predictor: CoarsePredictor,
          refiner: InteractionRefiner | None, cfg: PrediFlowConfig, seed: int = 0,
          force_zero_residual: bool = False, batched: bool = True) -> PredictionSet:
    """Full prediction-refinement inference for one observation pair."""
    hist_flat_p = predictor.history_flat(obs_human)
    if refiner is not None:
        hist_flat_r = refiner.human_flat(obs_human)
        robot_flat = refiner.robot_flat(obs_robot)
    else:
        hist_flat_r = robot_flat = None
    return infer_from_flats(hist_flat_p, hist_flat_r, robot_flat, predictor, refiner,
                            cfg, seed, force_zero_residual=force_zero_residual,
                            batched=batched)


def infer_from_flats(hist_flat_p, hist_flat_r, robot_flat, predictor, refiner,
                     cfg: PrediFlowConfig, seed: int = 0,
                     force_zero_residual: bool = False, batched: bool = True) -> PredictionSet:
    if cfg.alpha is None and refiner is not None:
        raise UsageError("inference requires a concrete alpha")
    dims = predictor.dims
    N, M = cfg.N, cfg.M
    alpha = cfg.alpha if cfg.alpha is not None else 1.0

    rng_coarse = derive_rng(seed, STREAM_PREDICTOR_SAMPLE)
    zc = rng_coarse.standard_normal((N, predictor.D, dims.tau), dtype=np.float32)
    coarse = predictor.push_noise(hist_flat_p, zc)                        # (N, 3J, tau)

    if refiner is None:
        motions = idct_arr(coarse, dims.L)
        return PredictionSet(coarse, np.zeros((N, 0) + coarse.shape[1:], np.float32),
                             coarse, motions, agg=cfg.agg)

    rng_resid = derive_rng(seed, STREAM_RESIDUAL_SAMPLE)
    if force_zero_residual:
        y0 = np.zeros((N, M, predictor.D, dims.tau), dtype=np.float32)
    else:
        y0 = rng_resid.standard_normal((N, M, predictor.D, dims.tau), dtype=np.float32)

    init_flats = np.repeat(coarse.reshape(N, -1), M, axis=0)              # (N*M, 3J*tau)
    hists = np.broadcast_to(hist_flat_r, (N * M, hist_flat_r.shape[-1]))
    robots = np.broadcast_to(robot_flat, (N * M, robot_flat.shape[-1]))
    flat_y0 = y0.reshape(N * M, predictor.D, dims.tau)

    if force_zero_residual:
        residuals_flat = flat_y0 / np.float32(alpha)                      # exactly zero
    elif batched:
        residuals_flat = flow.sample_one_step(
            lambda y, cond, t: refiner.velocity(y, cond, t),
            flat_y0, (init_flats, hists, robots), alpha,
        )
    else:
        outs = []
        for i in range(N * M):
            outs.append(flow.sample_one_step(
                lambda y, cond, t: refiner.velocity(y, cond, t),
                flat_y0[i:i + 1],
                (init_flats[i:i + 1], hists[i:i + 1], robots[i:i + 1]),
                alpha,
            ))
        residuals_flat = np.concatenate(outs, axis=0)
    residuals = residuals_flat.reshape(N, M, predictor.D, dims.tau)

    if cfg.agg == "mean":
        final = coarse + residuals.mean(axis=1)
    else:
        final = (coarse[:, None] + residuals).reshape(N * M, predictor.D, dims.tau)
    motions = idct_arr(final, dims.L)
    if not np.all(np.isfinite(motions)):
        raise NumericError("inference produced non-finite motion")
    return PredictionSet(coarse, residuals, final, motions, agg=cfg.agg)


# -- training state container ------------------------------------------------------------
def save_train_state(path, refiner: InteractionRefiner, state: dict):
    arrays = refiner.store.state_arrays(include_adam=True)
    if state["best_arrays"] is not None:
        for k, v in state["best_arrays"].items():
            arrays["best::" + k] = v
    meta = refiner.hyper()
    meta["train_state"] = {
        "alpha": state["alpha"],
        "next_epoch": state["next_epoch"],
        "history": state["history"],
        "best_ade": state["best_ade"],
        "best_epoch": state["best_epoch"],
        "step_count": refiner.store.step_count,
        "has_best": state["best_arrays"] is not None,
    }
    write_checkpoint(path, arrays, meta)


def load_train_state(path) -> tuple[InteractionRefiner, dict]:
    arrays, meta = read_checkpoint(path)
    if "train_state" not in meta:
        raise DataError(f"{path} is not a training-state checkpoint")
    rcfg = RefinerConfig(d=meta["d"], blocks=meta["blocks"], heads=meta["heads"],
                         mlp_ratio=meta["mlp_ratio"], se_reduction=meta["se_reduction"])
    dims = MotionDims(T=meta["T"], F=meta["F"], tau=meta["tau"])
    refiner = InteractionRefiner(rcfg, dims, meta["J"], meta["K"],
                                 use_robot=meta.get("use_robot", True))
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith("best::")}
    refiner.store.load_arrays(model_arrays)
    ts = meta["train_state"]
    refiner.store.step_count = ts["step_count"]
    best_arrays = None
    if ts["has_best"]:
        best_arrays = {k[len("best::"):]: v for k, v in arrays.items() if k.startswith("best::")}
    state = {
        "alpha": ts["alpha"],
        "next_epoch": ts["next_epoch"],
        "history": ts["history"],
        "best_ade": ts["best_ade"],
        "best_epoch": ts["best_epoch"],
        "best_arrays": best_arrays,
    }
    return refiner, state
