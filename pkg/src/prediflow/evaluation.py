"""Displacement metrics, best/median/worst statistics, and the latency bench."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import PrediFlowConfig
from .dataset import find_similar, window_samples
from .errors import DimensionError, UsageError
from .pipeline import _window_seed, infer_from_flats
from .seeding import STREAM_VALIDATION

EVAL_STREAM = 77
BUDGET_S = 1.0 / 60.0  # one frame at 60 Hz


def ade(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean over frames of the L2 distance between full pose vectors."""
    if pred.shape != gt.shape:
        raise DimensionError(f"ade shapes disagree: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred: np.ndarray, gt: np.ndarray) -> float:
    """L2 pose distance at the final frame."""
    if pred.shape != gt.shape:
        raise DimensionError(f"fde shapes disagree: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def mm_metric(pred: np.ndarray, similar_gts, base: str = "ade") -> float:
    """Average of the base metric against every ground-truth future whose
    observation was similar (the set always contains the window itself)."""
    if len(similar_gts) == 0:
        raise UsageError("similarity set must be non-empty")
    fn = {"ade": ade, "fde": fde}[base]
    return float(np.mean([fn(pred, gt) for gt in similar_gts]))


def bmw(values) -> tuple[float, float, float]:
    """(best, median, worst) = (min, median, max); even counts use the
    midpoint of the two central values."""
    if len(values) == 0:
        raise UsageError("bmw needs at least one value")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.min()), float(np.median(arr)), float(arr.max())


def _sample_ades(futures: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.linalg.norm(futures - gt[None], axis=-1).mean(axis=-1)


def _sample_fdes(futures: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.linalg.norm(futures[:, -1, :] - gt[-1][None], axis=-1)


def _sample_mm(futures: np.ndarray, similar_futs: np.ndarray, base: str) -> np.ndarray:
    # futures: (n, F, D); similar_futs: (s, F, D) -> (n,) mean over the set
    if base == "ade":
        d = np.linalg.norm(futures[:, None] - similar_futs[None], axis=-1).mean(axis=-1)
    else:
        d = np.linalg.norm(futures[:, None, -1, :] - similar_futs[None, :, -1, :], axis=-1)
    return d.mean(axis=1)


METRIC_NAMES = ("ade", "fde", "mmade", "mmfde")
CASE_NAMES = ("best", "median", "worst")


@dataclass
class MetricTable:
    """Per-metric best/median/worst, averaged over evaluation windows."""

    values: dict = field(default_factory=dict)  # metric -> {case -> float}

    def as_dict(self) -> dict:
        return {m: dict(v) for m, v in self.values.items()}


def evaluate_windows(windows, predictor, refiner, cfg: PrediFlowConfig, seed: int = 0,
                     threshold: float = 0.2, force_zero_residual: bool = False) -> MetricTable:
    """Metric table over a list of windows (prediction vs ground-truth future)."""
    if not windows:
        raise UsageError("evaluation needs at least one window")
    T = predictor.dims.T
    similar = find_similar(windows, threshold)
    all_futures = np.stack([w.fut_human for w in windows]).astype(np.float32)

    if refiner is not None:
        hist_r = refiner.human_flat(np.stack([w.obs_human for w in windows]).astype(np.float32))
        robot_r = refiner.robot_flat(np.stack([w.obs_robot for w in windows]).astype(np.float32))
    hist_p = predictor.history_flat(np.stack([w.obs_human for w in windows]).astype(np.float32))

    acc = {m: {c: 0.0 for c in CASE_NAMES} for m in METRIC_NAMES}
    for i, w in enumerate(windows):
        pred_set = infer_from_flats(
            hist_p[i],
            hist_r[i] if refiner is not None else None,
            robot_r[i] if refiner is not None else None,
            predictor, refiner, cfg,
            seed=_window_seed(seed, EVAL_STREAM, i),
            force_zero_residual=force_zero_residual,
        )
        futures = pred_set.futures(T)
        gt = all_futures[i]
        sim_futs = all_futures[similar[i]]
        per_metric = {
            "ade": _sample_ades(futures, gt),
            "fde": _sample_fdes(futures, gt),
            "mmade": _sample_mm(futures, sim_futs, "ade"),
            "mmfde": _sample_mm(futures, sim_futs, "fde"),
        }
        for m, vals in per_metric.items():
            b, md, wst = bmw(vals)
            acc[m]["best"] += b
            acc[m]["median"] += md
            acc[m]["worst"] += wst
    n = len(windows)
    return MetricTable({m: {c: acc[m][c] / n for c in CASE_NAMES} for m in METRIC_NAMES})


def improvement_pct(coarse: MetricTable, refined: MetricTable) -> dict:
    """(coarse - refined) / coarse per metric and case, in percent."""
    out = {}
    for m in METRIC_NAMES:
        out[m] = {}
        for c in CASE_NAMES:
            base = coarse.values[m][c]
            out[m][c] = 100.0 * (base - refined.values[m][c]) / base if base > 0 else 0.0
    return out


def evaluate(trials, split, predictor, refiner, cfg: PrediFlowConfig, seed: int = 0,
             threshold: float = 0.2, eval_stride: int = 15) -> dict:
    """Coarse and (optionally) refined metric tables over the test split."""
    windows = window_samples([trials[i] for i in split.test], predictor.dims.T,
                             predictor.dims.F, eval_stride)
    if not windows:
        raise UsageError("test split produced no windows")
    report = {"n_windows": len(windows), "N": cfg.N, "M": cfg.M, "agg": cfg.agg}
    coarse_cfg = PrediFlowConfig(N=cfg.N, M=cfg.M, agg=cfg.agg, alpha=cfg.alpha or 1.0,
                                 epochs=cfg.epochs, samples_per_epoch=cfg.samples_per_epoch,
                                 batch=cfg.batch, lr_init=cfg.lr_init,
                                 warmup_epochs=cfg.warmup_epochs)
    coarse_table = evaluate_windows(windows, predictor, None, coarse_cfg, seed, threshold)
    report["coarse"] = coarse_table.as_dict()
    if refiner is not None:
        refined_table = evaluate_windows(windows, predictor, refiner, cfg, seed, threshold)
        report["refined"] = refined_table.as_dict()
        report["improvement_pct"] = improvement_pct(coarse_table, refined_table)
    return report


@dataclass
class LatencyReport:
    mean_s: float
    std_s: float
    min_s: float
    max_s: float
    runs: int
    n: int
    m: int
    warmup: int
    budget_s: float
    within_budget: bool
    samples_s: list
    predictor_only_mean_s: float
    overhead_ratio: float
    threads: int
    backend: str

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def bench_latency(obs_human, obs_robot, predictor, refiner, cfg: PrediFlowConfig,
                  runs: int = 20, warmup: int = 3, threads: int = 1,
                  seed: int = 0) -> LatencyReport:
    """Wall-clock of the full pipeline for one observation, monotonic clock.

    Also times the predictor-only path so the refinement overhead factor can
    be reported against the real-time budget.
    """
    from . import kernel_backend

    if runs < 1:
        raise UsageError("need runs >= 1")
    hist_p = predictor.history_flat(obs_human)
    hist_r = refiner.human_flat(obs_human) if refiner is not None else None
    robot_r = refiner.robot_flat(obs_robot) if refiner is not None else None

    def full_run(i: int):
        infer_from_flats(hist_p, hist_r, robot_r, predictor, refiner, cfg,
                         seed=_window_seed(seed, STREAM_VALIDATION, i))

    def coarse_run(i: int):
        infer_from_flats(hist_p, None, None, predictor, None, cfg,
                         seed=_window_seed(seed, STREAM_VALIDATION, i))

    for i in range(warmup):
        full_run(i)
        coarse_run(i)

    samples = []
    for i in range(runs):
        t0 = time.perf_counter()
        full_run(warmup + i)
        samples.append(time.perf_counter() - t0)
    coarse_samples = []
    for i in range(runs):
        t0 = time.perf_counter()
        coarse_run(warmup + i)
        coarse_samples.append(time.perf_counter() - t0)

    arr = np.asarray(samples)
    pred_mean = float(np.mean(coarse_samples))
    return LatencyReport(
        mean_s=float(arr.mean()), std_s=float(arr.std()),
        min_s=float(arr.min()), max_s=float(arr.max()),
        runs=runs, n=cfg.N, m=cfg.M, warmup=warmup,
        budget_s=BUDGET_S, within_budget=bool(arr.mean() <= BUDGET_S),
        samples_s=[float(s) for s in samples],
        predictor_only_mean_s=pred_mean,
        overhead_ratio=float(arr.mean() / pred_mean) if pred_mean > 0 else float("inf"),
        threads=threads, backend=kernel_backend,
    )
