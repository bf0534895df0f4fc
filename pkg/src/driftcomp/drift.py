"""Conductance drift models and the weight<->conductance mapping.

Two drift generators are provided. The analytic model perturbs each device
with a log-time Gaussian whose mean and standard deviation grow as
``a_mu * ln(t)`` and ``a_sigma * ln(t) + b_sigma`` (microsiemens), plus a
multiplicative per-device variation term. The table-driven model replays
state-dependent (mu_i, sigma_i) statistics measured at a fixed reference
time, linearly interpolated between programmed conductance levels.

Natural log is used throughout; the coefficients are plain fields, so a
base-10 reading is a matter of rescaling them, not of code changes.
Times below 1 second are rejected: the analytic mean would turn negative
there, outside the model's calibrated range.
"""

import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, FormatError
from .quant import QuantizedTensor, dequantize
from .rng import make_rng


@dataclass(frozen=True)
class AnalyticDriftParams:
    """Coefficients of the log-time Gaussian drift model, in uS."""

    a_mu: float = 0.089
    a_sigma: float = 0.042
    b_sigma: float = 0.4118
    sigma_eps: float = 0.05

    def __post_init__(self):
        for name in ("a_mu", "a_sigma", "b_sigma", "sigma_eps"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class MeasuredDriftTable:
    """Per-level (mu, sigma) drift statistics measured at a reference time.

    ``entries`` is an ordered tuple of (g_level_uS, mu_uS, sigma_uS) rows,
    strictly increasing in g_level. Statistics apply as a snapshot taken at
    ``reference_time`` seconds after programming; evaluations at other times
    reuse the same snapshot.
    """

    reference_time: float
    entries: tuple

    def __post_init__(self):
        if len(self.entries) < 2:
            raise ConfigError("measured drift table needs at least 2 entries")
        levels = [e[0] for e in self.entries]
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ConfigError("g_level entries must be strictly increasing")
        if any(e[2] < 0 for e in self.entries):
            raise ConfigError("sigma entries must be nonnegative")
        if self.reference_time < 1:
            raise ConfigError("reference_time must be >= 1 second")

    def interpolate(self, g: np.ndarray):
        """(mu, sigma) linearly interpolated in g, clamped at the end levels."""
        g = np.asarray(g, dtype=np.float64)
        levels = np.array([e[0] for e in self.entries])
        mu = np.interp(g, levels, np.array([e[1] for e in self.entries]))
        sigma = np.interp(g, levels, np.array([e[2] for e in self.entries]))
        return mu, sigma

    @staticmethod
    def from_csv(path_or_text) -> "MeasuredDriftTable":
        """Parse the strict CSV format.

        One comment line ``# reference_time_s=<float>`` plus a header
        ``g_level_uS,mu_uS,sigma_uS`` and one row per programmed state.
        Unknown columns are rejected.
        """
        if hasattr(path_or_text, "read"):
            text = path_or_text.read()
        elif "\n" in str(path_or_text):
            text = str(path_or_text)
        else:
            with open(path_or_text, "r", encoding="utf-8") as fh:
                text = fh.read()
        reference_time = None
        header = None
        rows = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("reference_time_s="):
                    reference_time = float(body.split("=", 1)[1])
                continue
            fields = [f.strip() for f in line.split(",")]
            if header is None:
                header = fields
                if header != ["g_level_uS", "mu_uS", "sigma_uS"]:
                    raise FormatError(
                        f"line {lineno}: expected header g_level_uS,mu_uS,sigma_uS, got {line!r}"
                    )
                continue
            if len(fields) != 3:
                raise FormatError(f"line {lineno}: expected 3 columns, got {len(fields)}")
            try:
                rows.append(tuple(float(f) for f in fields))
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
        if reference_time is None:
            raise FormatError("missing '# reference_time_s=<float>' comment line")
        if header is None:
            raise FormatError("missing header line")
        return MeasuredDriftTable(reference_time=reference_time, entries=tuple(rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# reference_time_s={self.reference_time!r}\n")
        buf.write("g_level_uS,mu_uS,sigma_uS\n")
        for g, mu, sigma in self.entries:
            buf.write(f"{g!r},{mu!r},{sigma!r}\n")
        return buf.getvalue()


DriftModel = AnalyticDriftParams | MeasuredDriftTable

ENCODINGS = ("single-device-affine", "differential-pair")


@dataclass(frozen=True)
class ConductanceMap:
    """Affine mapping between weight units and device conductance (uS).

    ``w_absmax=None`` derives the range per layer from the quantizer grid
    (the full code range spans [g_min, g_max]). Negative drifted
    conductances are clamped to 0 by default since physical conductance is
    nonnegative; disable for pure-math tests.
    """

    g_min: float = 5.0
    g_max: float = 40.0
    encoding: str = "single-device-affine"
    w_absmax: float | None = None
    clamp_negative: bool = True

    def __post_init__(self):
        if self.g_min >= self.g_max:
            raise DomainError("g_min must be < g_max")
        if self.encoding not in ENCODINGS:
            raise DomainError(f"unknown encoding {self.encoding!r}; one of {ENCODINGS}")
        if self.w_absmax is not None and self.w_absmax <= 0:
            raise DomainError("w_absmax must be positive")


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 1.0):
        raise DomainError("drift time must be >= 1 second (model not calibrated below)")
    return t


def drift_mean(t, params: AnalyticDriftParams = AnalyticDriftParams()) -> np.ndarray | float:
    """Mean conductance drift a_mu * ln(t), in uS."""
    t = _check_time(t)
    out = params.a_mu * np.log(t)
    return float(out) if out.ndim == 0 else out


def drift_std(t, params: AnalyticDriftParams = AnalyticDriftParams()) -> np.ndarray | float:
    """Drift standard deviation a_sigma * ln(t) + b_sigma, in uS."""
    t = _check_time(t)
    out = params.a_sigma * np.log(t) + params.b_sigma
    return float(out) if out.ndim == 0 else out


def sample_drifted_conductance(
    g_target, t: float, params: AnalyticDriftParams, rng: np.random.Generator
):
    """One drifted-conductance draw per target device.

    (g_target + N(mu(t), sigma(t)^2)) * (1 + N(0, sigma_eps^2)); the raw
    draw is returned unclamped (clamping is the injection pipeline's job).
    """
    g_target = np.asarray(g_target, dtype=np.float64)
    if np.any(g_target < 0):
        raise DomainError("g_target must be nonnegative")
    mu = drift_mean(t, params)
    sigma = drift_std(t, params)
    g_drift = rng.normal(mu, sigma, size=g_target.shape)
    eps = rng.normal(0.0, params.sigma_eps, size=g_target.shape) if params.sigma_eps > 0 else 0.0
    out = (g_target + g_drift) * (1.0 + eps)
    return float(out) if out.ndim == 0 else out


def sample_measured_drift(g_target, table: MeasuredDriftTable, rng: np.random.Generator):
    """Drifted conductance from the measured per-state statistics."""
    g_target = np.asarray(g_target, dtype=np.float64)
    mu, sigma = table.interpolate(g_target)
    out = g_target + rng.normal(mu, sigma, size=g_target.shape)
    return float(out) if out.ndim == 0 else out


def _resolve_absmax(w, cmap: ConductanceMap):
    """Weight-range limit of the map: explicit scalar, or derived per layer
    from the quantizer grid (per output channel when the scale is)."""
    if cmap.w_absmax is not None:
        return cmap.w_absmax
    if isinstance(w, QuantizedTensor):
        return w.w_absmax_per_channel()
    raise DomainError("w_absmax must be set on the ConductanceMap for raw arrays")


def _map_w2g(values: np.ndarray, absmax, cmap: ConductanceMap):
    if np.any(np.abs(values) > np.asarray(absmax) * (1 + 1e-12)):
        raise DomainError("weight magnitude exceeds the map's w_absmax")
    span = cmap.g_max - cmap.g_min
    if cmap.encoding == "single-device-affine":
        return cmap.g_min + (values + absmax) / (2.0 * absmax) * span
    g_plus = cmap.g_min + np.maximum(values, 0.0) / absmax * span
    g_minus = cmap.g_min + np.maximum(-values, 0.0) / absmax * span
    return g_plus, g_minus


def weights_to_conductance(w, cmap: ConductanceMap):
    """Map weights onto device conductances.

    Affine encoding returns one tensor with [-absmax, +absmax] spanning
    [g_min, g_max]; differential-pair returns (g_plus, g_minus), each in
    range, with the weight proportional to their difference.
    """
    absmax = _resolve_absmax(w, cmap)
    values = dequantize(w) if isinstance(w, QuantizedTensor) else np.asarray(w, dtype=np.float64)
    return _map_w2g(values, absmax, cmap)


def conductance_to_weights(g, cmap: ConductanceMap, w_absmax=None):
    """Exact inverse of the affine map, applied without clamping."""
    absmax = w_absmax if w_absmax is not None else cmap.w_absmax
    if absmax is None:
        raise DomainError("w_absmax required to invert the conductance map")
    span = cmap.g_max - cmap.g_min
    if cmap.encoding == "single-device-affine":
        g = np.asarray(g, dtype=np.float64)
        return (g - cmap.g_min) / span * (2.0 * absmax) - absmax
    g_plus, g_minus = (np.asarray(v, dtype=np.float64) for v in g)
    return (g_plus - g_minus) / span * absmax


@dataclass(frozen=True)
class DriftedWeights:
    """Per-layer drifted weight tensors; a pure function of its inputs."""

    values: dict
    drift_time: float
    seed: int


class PreparedBackbone:
    """Caches the target conductances of a frozen backbone.

    Drift injection is called once per mini-batch and per Monte-Carlo
    instance; dequantization and the weight->conductance map do not change
    between calls, so they are computed once here.
    """

    def __init__(self, quantized: dict, cmap: ConductanceMap):
        self.cmap = cmap
        self.absmax = {}
        self.conductances = {}
        self.shapes = {}
        for name, q in quantized.items():
            if not isinstance(q, QuantizedTensor):
                raise DomainError(f"backbone layer {name} is not a QuantizedTensor")
            self.absmax[name] = _resolve_absmax(q, cmap)
            self.conductances[name] = _map_w2g(dequantize(q), self.absmax[name], cmap)
            self.shapes[name] = q.shape


def inject_drift(
    backbone,
    t: float,
    model: DriftModel,
    cmap: ConductanceMap | None = None,
    seed: int = 0,
) -> DriftedWeights:
    """Sample one drift instance over every backbone layer.

    ``backbone`` is a {layer_name: QuantizedTensor} mapping or an already
    prepared ``PreparedBackbone``. Deterministic under (t, seed): layers are
    visited in insertion order with a single seeded generator.
    """
    _check_time(t)
    prepared = backbone if isinstance(backbone, PreparedBackbone) else PreparedBackbone(backbone, cmap)
    cmap = prepared.cmap
    rng = make_rng(seed)
    drifted = {}

    def _sample(g):
        if isinstance(model, AnalyticDriftParams):
            out = sample_drifted_conductance(g, t, model, rng)
        else:
            out = sample_measured_drift(g, model, rng)
        if cmap.clamp_negative:
            out = np.maximum(out, 0.0)
        return out

    for name, g in prepared.conductances.items():
        absmax = prepared.absmax[name]
        if cmap.encoding == "single-device-affine":
            g_real = _sample(g)
        else:
            g_real = (_sample(g[0]), _sample(g[1]))
        drifted[name] = conductance_to_weights(g_real, cmap, w_absmax=absmax)
    return DriftedWeights(values=drifted, drift_time=float(t), seed=int(seed))
