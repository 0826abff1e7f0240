"""Run configuration: desk-scale defaults, the paper-scale preset, JSON IO.

Configs are strict: unknown keys anywhere in the document are rejected so a
typo cannot silently fall back to a default.  ``PREDIFLOW_SEED`` in the
environment overrides the seed.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import ScenarioConfig
from .errors import ConfigError


@dataclass
class MotionDims:
    """Window geometry: observe T frames, predict F, keep tau DCT terms."""

    T: int = 30
    F: int = 120
    tau: int = 20

    def __post_init__(self):
        if self.T < 1 or self.F < 0:
            raise ConfigError("need T >= 1 and F >= 0")
        if not 1 <= self.tau <= self.T + self.F:
            raise ConfigError("need 1 <= tau <= T + F")

    @property
    def L(self) -> int:
        return self.T + self.F


@dataclass
class PredictorConfig:
    latent: int = 64
    blocks: int = 4
    token_ratio: float = 4.0
    channel_ratio: float = 4.0

    def __post_init__(self):
        if self.latent < 2 or self.latent % 2 != 0:
            raise ConfigError("predictor latent must be even and >= 2")
        if self.blocks < 1:
            raise ConfigError("predictor needs at least one block")


@dataclass
class RefinerConfig:
    d: int = 64
    blocks: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    se_reduction: int = 4

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"refiner dim {self.d} not divisible by {self.heads} heads")
        if self.d % 2 != 0:
            raise ConfigError("refiner dim must be even")
        if self.blocks < 1:
            raise ConfigError("refiner needs at least one block")


@dataclass
class PrediFlowConfig:
    """Inference fan-out and refiner training schedule."""

    N: int = 10                  # coarse samples per observation
    M: int = 10                  # residuals per coarse sample
    agg: str = "mean"            # {"mean", "all"}
    alpha: float | None = None   # estimated from data when None
    epochs: int = 60
    samples_per_epoch: int = 5000
    batch: int = 32
    lr_init: float = 2.5e-4
    warmup_epochs: int = 6

    def __post_init__(self):
        if self.N < 1 or self.M < 1:
            raise ConfigError("need N >= 1 and M >= 1")
        if self.agg not in ("mean", "all"):
            raise ConfigError(f"unknown aggregation {self.agg!r}")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.epochs < 1 or self.samples_per_epoch < 1 or self.batch < 1:
            raise ConfigError("training schedule values must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    n_trials: int = 32
    motion: MotionDims = field(default_factory=MotionDims)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    pipeline: PrediFlowConfig = field(default_factory=PrediFlowConfig)

    def __post_init__(self):
        env_seed = os.environ.get("PREDIFLOW_SEED")
        if env_seed is not None:
            try:
                self.seed = int(env_seed)
            except ValueError as exc:
                raise ConfigError(f"PREDIFLOW_SEED is not an integer: {env_seed!r}") from exc
        if self.scenario.trial_length < self.motion.L:
            raise ConfigError(
                f"trial_length {self.scenario.trial_length} shorter than T+F={self.motion.L}"
            )
        # the scenario seed follows the run seed unless set explicitly
        if self.scenario.seed != self.seed:
            self.scenario = dataclasses.replace(self.scenario, seed=self.seed)


def desk_config() -> RunConfig:
    """Desktop-scale defaults: small latents, short schedule, N=10."""
    return RunConfig()


def paper_scale_config() -> RunConfig:
    """Constants matching the reference training setup (heavy on CPU)."""
    return RunConfig(
        predictor=PredictorConfig(latent=512, blocks=4),
        refiner=RefinerConfig(d=512, blocks=7, heads=8),
        pipeline=PrediFlowConfig(
            N=50, M=10, epochs=1000, samples_per_epoch=50000, batch=64,
            lr_init=2.5e-4, warmup_epochs=100,
        ),
    )


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        ftype = fields[name].type
        if name in ("motion", "scenario", "predictor", "refiner", "pipeline"):
            sub_cls = {
                "motion": MotionDims, "scenario": ScenarioConfig,
                "predictor": PredictorConfig, "refiner": RefinerConfig,
                "pipeline": PrediFlowConfig,
            }[name]
            kwargs[name] = _build(sub_cls, value, f"{where}.{name}")
        else:
            kwargs[name] = tuple(value) if isinstance(value, list) and name == "link_lengths" else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path_or_doc, paper_scale: bool = False) -> RunConfig:
    """Load a RunConfig from a JSON file path or a parsed dict.

    ``paper_scale`` applies the paper constants first; the document then
    overrides individual values.
    """
    if path_or_doc is None:
        doc = {}
    elif isinstance(path_or_doc, dict):
        doc = path_or_doc
    else:
        try:
            doc = json.loads(Path(path_or_doc).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path_or_doc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc

    base = paper_scale_config() if paper_scale else desk_config()
    merged = config_to_dict(base)
    _deep_merge(merged, doc, "config")
    return _build(RunConfig, merged, "config")


def _deep_merge(base: dict, override: dict, where: str):
    if not isinstance(override, dict):
        raise ConfigError(f"{where}: expected an object")
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value, f"{where}.{key}")
        else:
            base[key] = value


def config_to_dict(cfg: RunConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["scenario"]["link_lengths"] = list(doc["scenario"]["link_lengths"])
    return doc
