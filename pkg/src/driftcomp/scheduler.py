"""Drift-aware scheduling: geometric time advance, Monte-Carlo accuracy
statistics, and the mu - k*sigma trigger that decides when a new
compensation set is worth training.

The loop is written against two small protocols, an evaluator
``(t, active_set, instance_seed) -> accuracy`` and a trainer
``(t, set_id, active_set) -> ScalingVectorSet``, so analytic stubs can
drive it in tests exactly as the real model does in production.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import BackboneCheckpoint
from .compensation import ActiveCompensation, ScalingVectorSet, SharedProjections, select_active_index
from .drift import ConductanceMap, DriftModel, PreparedBackbone, conductance_to_weights, inject_drift
from .errors import ConfigError, DomainError, FormatError
from .model_zoo import LabeledDataset, evaluate_accuracy
from .rng import child_seed

TEN_YEARS_S = 10 * 365 * 24 * 3600.0  # 3.1536e8


@dataclass(frozen=True)
class SchedulerConfig:
    a_thr: float = 0.85
    a_thr_mode: str = "absolute"  # or "drop": a_thr = (1 - value) * drift-free acc
    t_max: float = TEN_YEARS_S
    multiplier: float = 1.5
    n_eval: int = 100
    confidence_k: float = 3.0

    def __post_init__(self):
        if not (0.0 < self.a_thr < 1.0):
            raise ConfigError("a_thr must lie strictly between 0 and 1")
        if self.a_thr_mode not in ("absolute", "drop"):
            raise ConfigError("a_thr_mode must be 'absolute' or 'drop'")
        if self.multiplier <= 1.0:
            raise ConfigError("multiplier must be > 1")
        if self.n_eval < 2:
            raise ConfigError("n_eval must be >= 2")
        if self.t_max <= 1.0:
            raise ConfigError("t_max must exceed 1 second")

    def resolve_a_thr(self, drift_free_accuracy: float | None) -> float:
        if self.a_thr_mode == "absolute":
            return self.a_thr
        if drift_free_accuracy is None:
            raise ConfigError("a_thr_mode='drop' needs the drift-free accuracy")
        return (1.0 - self.a_thr) * drift_free_accuracy


@dataclass(frozen=True)
class EvalStats:
    t: float
    mu: float
    sigma: float
    n: int

    def __post_init__(self):
        if self.sigma < 0 or not (0.0 <= self.mu <= 1.0):
            raise DomainError("EvalStats out of range")


@dataclass
class ScheduleEntry:
    t: float
    set_id: int
    before: EvalStats | None = None
    after: EvalStats | None = None


@dataclass
class Schedule:
    """Drift points with their trained sets and the evaluation trace."""

    entries: list
    trace: list = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    archive_path: str | None = None

    def __post_init__(self):
        times = [e.t for e in self.entries]
        if not times or times[0] != 1.0:
            raise DomainError("schedule must start at t = 1 second")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DomainError("drift points must be strictly increasing")

    def times(self) -> list:
        return [e.t for e in self.entries]

    def active_entry(self, t: float) -> ScheduleEntry:
        return self.entries[select_active_index(t, self.times())]


def eval_stats(t: float, evaluator, active_set, n_eval: int, base_seed: int) -> EvalStats:
    """Sample mean / unbiased std of accuracy over independent drift instances."""
    if n_eval < 2:
        raise ConfigError("n_eval must be >= 2")
    accs = np.array(
        [evaluator(t, active_set, child_seed(base_seed, "inst", i)) for i in range(n_eval)]
    )
    return EvalStats(t=float(t), mu=float(accs.mean()), sigma=float(accs.std(ddof=1)), n=n_eval)


def should_trigger(stats: EvalStats, a_thr: float, confidence_k: float = 3.0) -> bool:
    """True when the lower confidence bound falls below the accuracy floor."""
    return (stats.mu - confidence_k * stats.sigma) < a_thr


def run_schedule(
    evaluator,
    trainer,
    cfg: SchedulerConfig,
    initial_set: ScalingVectorSet,
    base_seed: int,
    a_thr: float | None = None,
    config_echo: dict | None = None,
):
    """Algorithm: start at t=1 with the initial (inactive) set; multiply t by
    the configured factor while t < t_max; at each visited time estimate
    accuracy statistics with the currently active set; when the confidence
    bound dips below the floor, train a new set at that time and make it
    active. Returns (Schedule, list of sets including the initial one).
    """
    threshold = cfg.a_thr if a_thr is None else a_thr
    active = initial_set
    sets = [initial_set]
    stats0 = eval_stats(1.0, evaluator, active, cfg.n_eval, child_seed(base_seed, "eval", 0))
    entries = [ScheduleEntry(t=1.0, set_id=initial_set.set_id, before=stats0, after=stats0)]
    trace = [
        {
            "t": 1.0,
            "mu": stats0.mu,
            "sigma": stats0.sigma,
            "triggered": False,
            "active_set": initial_set.set_id,
        }
    ]
    t = 1.0
    step = 0
    while t < cfg.t_max:
        t = t * cfg.multiplier
        step += 1
        before = eval_stats(t, evaluator, active, cfg.n_eval, child_seed(base_seed, "eval", step))
        triggered = should_trigger(before, threshold, cfg.confidence_k)
        if triggered:
            new_set = trainer(t, len(sets), active)
            if new_set.drift_time != t:
                raise DomainError(f"trainer returned a set tagged {new_set.drift_time}, wanted {t}")
            sets.append(new_set)
            active = new_set
            after = eval_stats(
                t, evaluator, active, cfg.n_eval, child_seed(base_seed, "post", step)
            )
            entries.append(ScheduleEntry(t=t, set_id=new_set.set_id, before=before, after=after))
        trace.append(
            {
                "t": t,
                "mu": before.mu,
                "sigma": before.sigma,
                "triggered": triggered,
                "active_set": active.set_id,
            }
        )
    schedule = Schedule(
        entries=entries,
        trace=trace,
        config_echo=config_echo or {},
        provenance={"base_seed": base_seed, "a_thr": threshold},
    )
    return schedule, sets


def sets_vs_tolerance(schedule_runner, drift_free_accuracy: float, tolerance_grid) -> list:
    """|T| as a function of the acceptable accuracy-drop tolerance.

    ``schedule_runner(a_thr) -> Schedule``; tolerances are fractions of the
    drift-free accuracy (0.05 = accept a 5% drop).
    """
    if not tolerance_grid:
        raise ConfigError("tolerance grid must not be empty")
    rows = []
    for tol in tolerance_grid:
        a_thr = (1.0 - tol) * drift_free_accuracy
        schedule = schedule_runner(a_thr)
        rows.append(
            {
                "tolerance_pct": 100.0 * tol,
                "a_thr": a_thr,
                "num_sets": len(schedule.entries),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# the concrete model-backed evaluator
# ---------------------------------------------------------------------------

class BackboneEvaluator:
    """Evaluates top-1 accuracy of a drifted backbone on a held-out split.

    Target conductances are prepared once; each call samples one drift
    instance and runs inference in float32 (gradients never flow here).
    """

    def __init__(
        self,
        backbone: BackboneCheckpoint,
        drift_model: DriftModel,
        dataset: LabeledDataset,
        cmap: ConductanceMap | None = None,
        proj: SharedProjections | None = None,
        batch: int = 256,
    ):
        if len(dataset) == 0:
            raise ConfigError("evaluation dataset is empty")
        self.backbone = backbone
        self.drift_model = drift_model
        self.cmap = cmap or ConductanceMap()
        self.prepared = PreparedBackbone(backbone.weights, self.cmap)
        self.proj = proj
        self.batch = batch
        self.dataset = LabeledDataset(
            dataset.images.astype(np.float32), dataset.labels, dataset.n_classes, dataset.split
        )
        self.biases = {k: v.astype(np.float32) for k, v in backbone.biases.items()}
        self.act_bits = backbone.scheme.act_bits

    def __call__(self, t: float, active_set, instance_seed: int) -> float:
        drifted = inject_drift(self.prepared, t, self.drift_model, seed=instance_seed)
        weights = {k: v.astype(np.float32) for k, v in drifted.values.items()}
        comp = None
        if active_set is not None and self.proj is not None:
            comp = ActiveCompensation(self.proj, active_set)
        return evaluate_accuracy(
            self.backbone.model,
            weights,
            self.biases,
            self.dataset,
            comp=comp,
            act_bits=self.act_bits,
            batch=self.batch,
        )

    def drift_free_accuracy(self) -> float:
        weights = {
            k: conductance_to_weights(
                g, self.cmap, w_absmax=self.prepared.absmax[k]
            ).astype(np.float32)
            for k, g in self.prepared.conductances.items()
        }
        return evaluate_accuracy(
            self.backbone.model,
            weights,
            self.biases,
            self.dataset,
            act_bits=self.act_bits,
            batch=self.batch,
        )


# ---------------------------------------------------------------------------
# schedule file
# ---------------------------------------------------------------------------

def _stats_doc(stats: EvalStats | None):
    if stats is None:
        return None
    return {"t": stats.t, "mu": stats.mu, "sigma": stats.sigma, "n": stats.n}


def _stats_from(doc):
    return None if doc is None else EvalStats(**doc)


def save_schedule(path: str, schedule: Schedule) -> None:
    doc = {
        "format_version": 1,
        "entries": [
            {
                "t": e.t,
                "set_id": e.set_id,
                "before": _stats_doc(e.before),
                "after": _stats_doc(e.after),
            }
            for e in schedule.entries
        ],
        "trace": schedule.trace,
        "config": schedule.config_echo,
        "provenance": schedule.provenance,
        "archive": schedule.archive_path,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_schedule(path: str) -> Schedule:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid schedule JSON: {exc}") from exc
    if doc.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported schedule version")
    entries = [
        ScheduleEntry(
            t=e["t"],
            set_id=e["set_id"],
            before=_stats_from(e["before"]),
            after=_stats_from(e["after"]),
        )
        for e in doc["entries"]
    ]
    return Schedule(
        entries=entries,
        trace=doc.get("trace", []),
        config_echo=doc.get("config", {}),
        provenance=doc.get("provenance", {}),
        archive_path=doc.get("archive"),
    )
