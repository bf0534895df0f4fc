"""Run configuration: one JSON document, strict keys, flag overrides win.

Keys mirror the library's config dataclasses one-to-one; anything unknown
is rejected so typos fail loudly instead of silently running defaults.
"""

import copy
import json
from dataclasses import dataclass, field

from .compensation import CompensationConfig
from .costs import HardwareProfile
from .drift import AnalyticDriftParams, ConductanceMap, MeasuredDriftTable
from .errors import ConfigError, DriftcompError
from .quant import QuantScheme
from .scheduler import SchedulerConfig
from .training import TrainConfig

DEFAULT_SWEEP_TIMES = [1.0, 3600.0, 86400.0, 2629800.0, 31536000.0, 315360000.0]
# 1 s, 1 h, 1 d, 1 month (30.4375 d), 1 y (365 d), 10 y

DEFAULTS = {
    "seed": 20411,
    "out_dir": "runs/out",
    "threads": None,
    "paths": {
        "backbone": None,
        "archive": None,
        "schedule": None,
        "dataset": None,
        "dataset_meta": None,
    },
    "drift_model": "analytic",
    "drift": {"a_mu": 0.089, "a_sigma": 0.042, "b_sigma": 0.4118, "sigma_eps": 0.05},
    "conductance": {
        "g_min": 5.0,
        "g_max": 40.0,
        "encoding": "single-device-affine",
        "w_absmax": None,
        "clamp_negative": True,
    },
    "quant": {"weight_bits": 4, "act_bits": 4, "symmetric": True, "per": "tensor"},
    "compensation": {"variant": "vera_plus", "rank": 1, "layer_selector": "all"},
    "scheduler": {
        "a_thr": 0.85,
        "a_thr_mode": "absolute",
        "t_max": 315360000.0,
        "multiplier": 1.5,
        "n_eval": 100,
        "confidence_k": 3.0,
    },
    "train": {
        "epochs": 3,
        "batch_size": 64,
        "learning_rate": 0.01,
        "optimizer": "adam",
        "seed": None,  # derived from the global seed when unset
        "warm_start": False,
        "momentum": 0.9,
    },
    "pretrain": {
        "epochs": 30,
        "learning_rate": 0.002,
        "batch_size": 64,
        "qat_epochs": 0,
        "min_accuracy": 0.8,
    },
    "hardware": {
        "tops_per_w_rram": 209.0,
        "tops_per_w_sram": 89.0,
        "density_rram": 2.53,
        "density_sram": 0.31,
    },
    "model": {"width": 8, "blocks": 1, "classes": 10, "in_channels": 3, "input_hw": 16},
    "data": {"kind": "synthetic", "n": 2304, "noise": 0.3, "eval_fraction": 0.1111111111111111},
    "cost": {
        "topology": "resnet20",
        "variants": ["lora", "vera", "vera_plus"],
        "ranks": [1],
        "set_counts": [11],
        "bits_comp": 16,
        "weight_bits": 4,
    },
    "sweep": {"times": DEFAULT_SWEEP_TIMES, "n_eval": None},
}


def _merge_strict(base: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and not isinstance(value, dict):
            raise ConfigError(f"config key {where} must be an object")
        if isinstance(base[key], dict):
            out[key] = _merge_strict(base[key], value, where)
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    seed: int
    out_dir: str
    threads: int | None
    paths: dict
    drift_model_spec: str
    drift: AnalyticDriftParams
    conductance: ConductanceMap
    quant: QuantScheme
    compensation: CompensationConfig
    scheduler: SchedulerConfig
    train: TrainConfig
    pretrain: dict
    hardware: HardwareProfile
    model: dict
    data: dict
    cost: dict
    sweep: dict
    echo: dict = field(default_factory=dict)

    def resolve_drift_model(self):
        spec = self.drift_model_spec
        if spec == "analytic":
            return self.drift
        if spec.startswith("measured:"):
            return MeasuredDriftTable.from_csv(spec.split(":", 1)[1])
        raise ConfigError(
            f"drift_model must be 'analytic' or 'measured:<table-path>', got {spec!r}"
        )


def build_run_config(doc: dict) -> RunConfig:
    merged = _merge_strict(DEFAULTS, doc or {})
    try:
        train_doc = dict(merged["train"])
        train_seed = train_doc.pop("seed")
        train = TrainConfig(seed=0 if train_seed is None else int(train_seed), **train_doc)
        cfg = RunConfig(
            seed=int(merged["seed"]),
            out_dir=str(merged["out_dir"]),
            threads=merged["threads"],
            paths=merged["paths"],
            drift_model_spec=str(merged["drift_model"]),
            drift=AnalyticDriftParams(**merged["drift"]),
            conductance=ConductanceMap(**merged["conductance"]),
            quant=QuantScheme(**merged["quant"]),
            compensation=CompensationConfig(**merged["compensation"]),
            scheduler=SchedulerConfig(**merged["scheduler"]),
            train=train,
            pretrain=merged["pretrain"],
            hardware=HardwareProfile(**merged["hardware"]),
            model=merged["model"],
            data=merged["data"],
            cost=merged["cost"],
            sweep=merged["sweep"],
            echo=merged,
        )
    except DriftcompError as exc:
        raise ConfigError(str(exc)) from exc
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    if merged["train"]["seed"] is None:
        cfg.echo["train"]["seed"] = None  # keep the derived-seed marker in the echo
    return cfg


def load_run_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Read a config file (optional) and apply CLI flag overrides (flags win)."""
    doc = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            doc[key] = value
    return build_run_config(doc)
