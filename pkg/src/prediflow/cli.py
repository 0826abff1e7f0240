"""Command-line entry point.

Machine-readable JSON goes to --report (or stdout); human-readable progress
goes to stderr, so pipelines can consume reports without log noise.  Exit
codes: 0 success, 1 config/usage error, 2 data/format error, 3 numeric error.

``--threads`` must take effect before numpy initializes its thread pools, so
heavy imports happen inside the command handlers, after the environment is
pinned.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time


def _pin_threads(argv):
    threads = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(threads)
    return int(threads) if threads is not None else 0


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _emit(doc: dict, report_path):
    text = json.dumps(doc, indent=2, sort_keys=True)
    if report_path:
        with open(report_path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _load_run_config(args):
    from .config import load_config

    return load_config(getattr(args, "config", None),
                       paper_scale=getattr(args, "paper_scale", False))


def _read_trials(path):
    from .dataset import read_dataset

    trials, scenario = read_dataset(path)
    return trials, scenario


def _split_for(run_cfg, n_trials: int):
    from .dataset import DatasetSplit

    return DatasetSplit.default(n_trials)


def cmd_gen_data(args) -> dict:
    import dataclasses

    from .config import config_to_dict
    from .dataset import generate_dataset, write_dataset

    run = _load_run_config(args)
    if args.seed is not None:
        run.seed = args.seed
        run.scenario = dataclasses.replace(run.scenario, seed=args.seed)
    if args.trials is not None:
        run.n_trials = args.trials
    _log(f"generating {run.n_trials} trials (seed {run.seed})")
    trials = generate_dataset(run.scenario, run.n_trials, min_length=run.motion.L)
    write_dataset(trials, args.out, run.scenario)
    size = os.path.getsize(args.out)
    _log(f"wrote {args.out} ({size} bytes)")
    return {"command": "gen-data", "out": str(args.out), "bytes": size,
            "trials": run.n_trials, "frames": sum(len(t) for t in trials),
            "seed": run.seed, "config": config_to_dict(run)}


def cmd_train_predictor(args) -> dict:
    from .config import config_to_dict
    from .predictor import train_predictor

    run = _load_run_config(args)
    trials, _ = _read_trials(args.data)
    split = _split_for(run, len(trials))
    t0 = time.perf_counter()
    model, history = train_predictor(trials, split, run.motion, run.predictor,
                                     run.pipeline, seed=run.seed, log=_log)
    model.save(args.out, {"seed": run.seed, "history": history})
    _log(f"saved predictor to {args.out} "
         f"(best val ADE {history['best_val_ade']:.4f}, {time.perf_counter()-t0:.0f}s)")
    return {"command": "train-predictor", "out": str(args.out),
            "best_epoch": history["best_epoch"], "best_val_ade": history["best_val_ade"],
            "train_loss": history["train_loss"], "val_ade": history["val_ade"],
            "seed": run.seed, "config": config_to_dict(run)}


def cmd_train_refiner(args) -> dict:
    from .config import config_to_dict
    from .pipeline import load_train_state, save_train_state, train_refiner
    from .predictor import CoarsePredictor
    from .refiner import InteractionRefiner

    run = _load_run_config(args)
    trials, _ = _read_trials(args.data)
    split = _split_for(run, len(trials))
    predictor = CoarsePredictor.load(args.predictor)
    state = None
    if args.resume:
        refiner, state = load_train_state(args.resume)
        _log(f"resuming from {args.resume} at epoch {state['next_epoch']}")
    else:
        refiner = InteractionRefiner(run.refiner, run.motion, predictor.J,
                                     run.scenario.K, seed=run.seed,
                                     use_robot=not args.no_robot)
    t0 = time.perf_counter()
    refiner, state = train_refiner(trials, split, predictor, refiner, run.pipeline,
                                   seed=run.seed, alpha=args.alpha, log=_log,
                                   stop_after_epoch=args.stop_after_epoch, state=state)
    if args.save_state:
        save_train_state(args.save_state, refiner, state)
        _log(f"saved resumable training state to {args.save_state}")
    refiner.save(args.out, {"alpha": state["alpha"], "seed": run.seed,
                            "best_epoch": state["best_epoch"],
                            "best_val_ade_median": state["best_ade"]})
    _log(f"saved refiner to {args.out} (alpha {state['alpha']:.4f}, "
         f"best val median ADE {state['best_ade']:.4f}, {time.perf_counter()-t0:.0f}s)")
    return {"command": "train-refiner", "out": str(args.out), "alpha": state["alpha"],
            "best_epoch": state["best_epoch"], "best_val_ade_median": state["best_ade"],
            "history": state["history"], "seed": run.seed, "config": config_to_dict(run)}


def _load_models(args):
    from .predictor import CoarsePredictor
    from .refiner import InteractionRefiner

    predictor = CoarsePredictor.load(args.predictor)
    refiner, alpha = None, None
    if getattr(args, "refiner", None):
        refiner, meta = InteractionRefiner.load(args.refiner)
        alpha = meta.get("alpha")
    return predictor, refiner, alpha


def cmd_predict(args) -> dict:
    from .config import PrediFlowConfig
    from .dataset import window_samples
    from .pipeline import infer

    run = _load_run_config(args)
    trials, _ = _read_trials(args.data)
    split = _split_for(run, len(trials))
    predictor, refiner, alpha = _load_models(args)
    windows = window_samples([trials[i] for i in split.test], run.motion.T,
                             run.motion.F, stride=15)
    if not 0 <= args.obs_index < len(windows):
        from .errors import UsageError

        raise UsageError(f"--obs-index {args.obs_index} outside [0, {len(windows)})")
    w = windows[args.obs_index]
    cfg = PrediFlowConfig(N=args.n, M=args.m, agg=args.agg,
                          alpha=alpha if alpha is not None else 1.0)
    pred_set = infer(w.obs_human, w.obs_robot, predictor, refiner, cfg, seed=run.seed)
    futures = pred_set.futures(run.motion.T)
    _log(f"{futures.shape[0]} predictions for test window {args.obs_index} "
         f"(trial {w.trial_index}, frame {w.start})")
    return {"command": "predict", "obs_index": args.obs_index,
            "trial_index": w.trial_index, "start_frame": w.start,
            "agg": args.agg, "n": args.n, "m": args.m,
            "n_predictions": int(futures.shape[0]),
            "refined": refiner is not None,
            "future_motions": futures.tolist()}


def cmd_evaluate(args) -> dict:
    from .config import PrediFlowConfig, config_to_dict
    from .evaluation import evaluate

    run = _load_run_config(args)
    trials, _ = _read_trials(args.data)
    split = _split_for(run, len(trials))
    predictor, refiner, alpha = _load_models(args)
    cfg = PrediFlowConfig(N=run.pipeline.N, M=run.pipeline.M, agg=args.agg or run.pipeline.agg,
                          alpha=alpha if alpha is not None else 1.0)
    t0 = time.perf_counter()
    report = evaluate(trials, split, predictor, refiner, cfg, seed=run.seed)
    report["command"] = "evaluate"
    report["elapsed_s"] = time.perf_counter() - t0
    report["config"] = config_to_dict(run)
    for model_key in ("coarse", "refined"):
        if model_key in report:
            t = report[model_key]
            _log(f"{model_key}: ADE B/M/W " + " / ".join(
                f"{t['ade'][c]:.3f}" for c in ("best", "median", "worst")))
    return report


def cmd_bench(args) -> dict:
    from .config import PrediFlowConfig, config_to_dict
    from .dataset import window_samples
    from .evaluation import bench_latency

    run = _load_run_config(args)
    trials, _ = _read_trials(args.data)
    split = _split_for(run, len(trials))
    predictor, refiner, alpha = _load_models(args)
    windows = window_samples([trials[i] for i in split.test], run.motion.T,
                             run.motion.F, stride=15)
    w = windows[args.obs_index]
    cfg = PrediFlowConfig(N=args.n, M=args.m, agg="mean",
                          alpha=alpha if alpha is not None else 1.0)
    report = bench_latency(w.obs_human, w.obs_robot, predictor, refiner, cfg,
                           runs=args.runs, warmup=args.warmup,
                           threads=args.threads, seed=run.seed)
    doc = {"command": "bench", "latency": report.as_dict(), "config": config_to_dict(run)}
    _log(f"full pipeline: mean {report.mean_s*1e3:.2f} ms over {report.runs} runs "
         f"(budget {report.budget_s*1e3:.2f} ms, within={report.within_budget})")
    _log(f"predictor-only: {report.predictor_only_mean_s*1e3:.2f} ms, "
         f"overhead ratio {report.overhead_ratio:.2f}")
    if args.compare_backends:
        doc["kernel_comparison"] = _compare_backends()
    return doc


def _compare_backends() -> dict:
    import numpy as np

    from ._kernels import get_backend

    try:
        compiled = get_backend("compiled")
    except ImportError:
        return {"available": False}
    python = get_backend("python")
    rng = np.random.default_rng(0)
    x2d = np.ascontiguousarray(rng.standard_normal((2200, 64)).astype(np.float32))
    soft = np.ascontiguousarray(rng.standard_normal((800, 22)).astype(np.float32))
    q, k, v = (np.ascontiguousarray(rng.standard_normal((400, 22, 16)).astype(np.float32))
               for _ in range(3))
    p = rng.standard_normal(200_000).astype(np.float32)
    g, m, vv = (rng.standard_normal(200_000).astype(np.float32) for _ in range(3))
    vv = np.abs(vv)

    cases = {
        "layer_norm_fwd": lambda mod: mod.layer_norm_fwd(x2d, 1e-5),
        "softmax_fwd": lambda mod: mod.softmax_fwd(soft),
        "attention_fwd": lambda mod: mod.attention_fwd(q, k, v, 0.25),
        "gelu_fwd": lambda mod: mod.gelu_fwd(x2d),
        "adam_step": lambda mod: mod.adam_step(p, g, m, vv, 1e-4, 0.9, 0.999, 1e-8, 0.1, 0.01),
    }
    out = {"available": True}
    for name, fn in cases.items():
        timings = {}
        for label, mod in (("python", python), ("compiled", compiled)):
            fn(mod)
            reps = 50
            t0 = time.perf_counter()
            for _ in range(reps):
                fn(mod)
            timings[label] = (time.perf_counter() - t0) / reps * 1e6
        out[name] = {
            "python_us": round(timings["python"], 2),
            "compiled_us": round(timings["compiled"], 2),
            "speedup": round(timings["python"] / timings["compiled"], 2),
        }
    return out


def cmd_gradcheck(args) -> dict:
    from .errors import NumericError
    from .gradchecks import TOLERANCE, run_all

    t0 = time.perf_counter()
    results = run_all(sample=args.sample)
    worst = max(results.values())
    for name, err in sorted(results.items()):
        _log(f"gradcheck {name}: {err:.3e}")
    _log(f"max relative error {worst:.3e} (tolerance {TOLERANCE:.0e}, "
         f"{time.perf_counter()-t0:.1f}s)")
    doc = {"command": "gradcheck", "checks": results, "max_rel_error": worst,
           "tolerance": TOLERANCE, "passed": bool(worst < TOLERANCE)}
    if worst >= TOLERANCE:
        _emit(doc, args.report)
        raise NumericError(f"gradient check failed: {worst:.3e} >= {TOLERANCE}")
    return doc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prediflow",
        description="Prediction-refinement pipeline for human motion forecasting in HRC",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="pin BLAS/OpenMP thread count (set before numpy loads)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON run config (unknown keys rejected)")
            p.add_argument("--paper-scale", action="store_true",
                           help="start from the paper-scale constants")
        p.add_argument("--report", help="write the JSON report here instead of stdout")

    p = sub.add_parser("gen-data", help="generate a synthetic HRC dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-predictor", help="train the coarse one-step generator")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_train_predictor)

    p = sub.add_parser("train-refiner", help="train the interaction-aware refiner")
    p.add_argument("--data", required=True)
    p.add_argument("--predictor", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=None,
                   help="residual scale; estimated from data when omitted")
    p.add_argument("--no-robot", action="store_true",
                   help="ablation: replace the robot condition with a constant token")
    p.add_argument("--resume", help="resume from a saved training state")
    p.add_argument("--save-state", help="save a resumable training state here")
    p.add_argument("--stop-after-epoch", type=int, default=None)
    common(p)
    p.set_defaults(fn=cmd_train_refiner)

    p = sub.add_parser("predict", help="predict futures for one test observation")
    p.add_argument("--data", required=True)
    p.add_argument("--predictor", required=True)
    p.add_argument("--refiner")
    p.add_argument("--obs-index", type=int, default=0)
    p.add_argument("--agg", choices=("mean", "all"), default="mean")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--m", type=int, default=10)
    common(p)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="metric tables over the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--predictor", required=True)
    p.add_argument("--refiner")
    p.add_argument("--agg", choices=("mean", "all"), default=None)
    common(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("bench", help="latency benchmark (monotonic clock, warm-up runs)")
    p.add_argument("--data", required=True)
    p.add_argument("--predictor", required=True)
    p.add_argument("--refiner")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--obs-index", type=int, default=0)
    p.add_argument("--compare-backends", action="store_true",
                   help="micro-benchmark compiled vs numpy kernel backends")
    common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of all layers/models")
    p.add_argument("--sample", type=int, default=4,
                   help="finite-difference probes per tensor for full-model checks")
    common(p, config=False)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = _pin_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "threads") or args.threads is None:
        args.threads = threads

    from .errors import (
        ConfigError,
        DataError,
        DimensionError,
        FormatError,
        NumericError,
        UsageError,
    )

    try:
        doc = args.fn(args)
        doc["threads"] = args.threads
        from . import kernel_backend

        doc["kernel_backend"] = kernel_backend
        _emit(doc, args.report)
        return 0
    except (ConfigError, UsageError, DimensionError) as exc:
        _log(f"error: config: {exc}")
        return 1
    except (FormatError, DataError, OSError) as exc:
        _log(f"error: data: {exc}")
        return 2
    except NumericError as exc:
        _log(f"error: numeric: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
