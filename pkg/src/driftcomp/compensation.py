"""Low-rank drift compensation branches: LoRA, VeRA, and the shared-vector
1x1 scheme ("vera_plus").

The vera_plus branch keeps two global random projections, frozen at
initialization and shared by every layer and every drift level; layers take
prefix slices sized to their channel counts. The only drift-specific
trainable state is one pair of vectors per layer per drift level:
``d_vec`` (length r, modulating the rank channels) and ``b_vec`` (length
C_out, gating the output). For convolutions the branch acts as a 1x1
convolution over channels, subsampled by the backbone stride, which cuts
projection parameters by K^2 versus the full-kernel LoRA/VeRA shapes.

The VeRA baseline is kept in its full K x K kernel form, mainly for
overhead comparison; LoRA pairs are per-layer and per-level.
"""

from dataclasses import dataclass

import numpy as np

from .container import BlobWriter, read_blob, read_container, write_container
from .errors import ConfigError, DomainError, FormatError
from .model_zoo import LayerSpec, ModelSpec, conv_forward
from .rng import make_rng

VARIANTS = ("none", "lora", "vera", "vera_plus")

ARCHIVE_MAGIC = b"DCARCH01"


@dataclass(frozen=True)
class CompensationConfig:
    variant: str = "vera_plus"
    rank: int = 1
    layer_selector: str = "all"  # all conv layers plus the final linear head

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; one of {VARIANTS}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.layer_selector != "all":
            raise ConfigError("only the 'all' layer selector is implemented")


@dataclass
class SharedProjections:
    """Global random matrices shared across layers and drift levels.

    a_max: (r_eff x d_max_in), b_max: (d_max_out x r_eff). For the K x K
    VeRA baseline the effective dimensions carry the kernel factor
    (r_eff = r*K_max etc.); for vera_plus they are plain channel counts.
    """

    a_max: np.ndarray
    b_max: np.ndarray
    init_seed: int
    r: int

    def __post_init__(self):
        self.a_max.setflags(write=False)
        self.b_max.setflags(write=False)

    @property
    def d_max_in(self) -> int:
        return self.a_max.shape[1]

    @property
    def d_max_out(self) -> int:
        return self.b_max.shape[0]


def init_shared_projections(r: int, d_max_in: int, d_max_out: int, seed: int) -> SharedProjections:
    """Zero-mean uniform entries, variance 1/d_max_in (A) and 1/r (B).

    Rows of both matrices then have near-unit expected norm, so the branch
    output scale is set by the trained vectors, not by the dimensions.
    """
    if r < 1 or d_max_in < 1 or d_max_out < 1:
        raise DomainError("projection dims must be positive")
    rng = make_rng(seed)
    lim_a = np.sqrt(3.0 / d_max_in)
    lim_b = np.sqrt(3.0 / r)
    a_max = rng.uniform(-lim_a, lim_a, size=(r, d_max_in))
    b_max = rng.uniform(-lim_b, lim_b, size=(d_max_out, r))
    return SharedProjections(a_max=a_max, b_max=b_max, init_seed=int(seed), r=int(r))


def slice_projections(proj: SharedProjections, c_in: int, c_out: int):
    """Prefix slices: first c_in columns of A, first c_out rows of B (views)."""
    if c_in > proj.d_max_in or c_out > proj.d_max_out:
        raise ConfigError(
            f"layer dims ({c_in},{c_out}) exceed projection capacity "
            f"({proj.d_max_in},{proj.d_max_out})"
        )
    return proj.a_max[:, :c_in], proj.b_max[:c_out, :]


def projection_dims(model: ModelSpec) -> tuple:
    """(d_max_in, d_max_out, k_max) over the compensated layers."""
    comp = model.compensated_layers()
    if not comp:
        raise ConfigError("model has no compensated layers")
    return (
        max(l.c_in for l in comp),
        max(l.c_out for l in comp),
        max(l.k for l in comp),
    )


def make_projections_for_model(model: ModelSpec, cfg: CompensationConfig, seed: int) -> SharedProjections:
    """Size the global projections to a model, honoring the variant's shapes."""
    d_in, d_out, k_max = projection_dims(model)
    if cfg.variant == "vera":
        return init_shared_projections(cfg.rank * k_max, d_in * k_max, d_out * k_max, seed)
    return init_shared_projections(cfg.rank, d_in, d_out, seed)


# ---------------------------------------------------------------------------
# scaling-vector sets
# ---------------------------------------------------------------------------

@dataclass
class ScalingVectorSet:
    """One drift level's trainable state: (d_vec, b_vec) per layer."""

    drift_time: float
    set_id: int
    vectors: dict  # layer name -> (d_vec, b_vec)
    variant: str = "vera_plus"

    def freeze(self) -> "ScalingVectorSet":
        for d, b in self.vectors.values():
            d.setflags(write=False)
            b.setflags(write=False)
        return self

    def copy(self, set_id: int | None = None, drift_time: float | None = None) -> "ScalingVectorSet":
        return ScalingVectorSet(
            drift_time=self.drift_time if drift_time is None else drift_time,
            set_id=self.set_id if set_id is None else set_id,
            vectors={k: (d.copy(), b.copy()) for k, (d, b) in self.vectors.items()},
            variant=self.variant,
        )


def new_scaling_set(
    model: ModelSpec,
    cfg: CompensationConfig,
    drift_time: float,
    set_id: int,
    d_init: float = 0.1,
) -> ScalingVectorSet:
    """Fresh vectors: d = d_init, b = 0, so the branch starts as a zero map."""
    vectors = {}
    for layer in model.compensated_layers():
        k = layer.k if cfg.variant == "vera" else 1
        d = np.full(cfg.rank * k, d_init, dtype=np.float64)
        b = np.zeros(layer.c_out * k, dtype=np.float64)
        vectors[layer.name] = (d, b)
    return ScalingVectorSet(float(drift_time), int(set_id), vectors, cfg.variant)


def select_active_index(t: float, times) -> int:
    """Index of the entry with the largest t_k <= t (inclusive left edges)."""
    times = list(times)
    if not times:
        raise DomainError("empty schedule")
    if t < times[0]:
        raise DomainError(f"t={t} precedes the first drift point {times[0]}")
    idx = 0
    for i, tk in enumerate(times):
        if tk <= t:
            idx = i
        else:
            break
    return idx


def select_active_set(t: float, sets) -> ScalingVectorSet:
    """The trained set covering elapsed time t."""
    ordered = sorted(sets, key=lambda s: s.drift_time)
    return ordered[select_active_index(t, [s.drift_time for s in ordered])]


# ---------------------------------------------------------------------------
# forward maps
# ---------------------------------------------------------------------------

def _apply_vectors(x2d: np.ndarray, d: np.ndarray, b: np.ndarray, a_sl: np.ndarray, b_sl: np.ndarray):
    """b * (B_sl @ (d * (A_sl @ x))) over rows of x2d."""
    u = x2d @ a_sl.T
    u = u * d
    v = u @ b_sl.T
    return v * b


def vera_plus_forward(
    x: np.ndarray, layer: LayerSpec, vec_set: ScalingVectorSet, proj: SharedProjections
) -> np.ndarray:
    """Vector-form branch output for inputs of shape (..., C_in)."""
    d, b = vec_set.vectors[layer.name]
    a_sl, b_sl = slice_projections(proj, layer.c_in, layer.c_out)
    x = np.asarray(x)
    if x.shape[-1] != layer.c_in:
        raise DomainError(f"{layer.name}: input dim {x.shape[-1]} != C_in {layer.c_in}")
    return _apply_vectors(x, d, b, a_sl, b_sl)


def pointwise_conv_compensation(
    x: np.ndarray, layer: LayerSpec, vec_set: ScalingVectorSet, proj: SharedProjections
) -> np.ndarray:
    """1x1-convolution form: the vector branch applied at each output position.

    The input is subsampled by the backbone layer's stride so the output
    spatial grid matches the backbone path exactly (padding is irrelevant
    for a 1x1 kernel).
    """
    if layer.kind != "conv2d":
        raise DomainError(f"{layer.name}: pointwise compensation needs a conv layer")
    n = x.shape[0]
    xs = x[:, :, :: layer.stride, :: layer.stride]
    hp, wp = xs.shape[2], xs.shape[3]
    x2d = xs.transpose(0, 2, 3, 1).reshape(-1, layer.c_in)
    out2d = vera_plus_forward(x2d, layer, vec_set, proj)
    return out2d.reshape(n, hp, wp, layer.c_out).transpose(0, 3, 1, 2)


def materialize_vera_kernel(
    layer: LayerSpec, vec_set: ScalingVectorSet, proj: SharedProjections
) -> np.ndarray:
    """Dense K x K kernel of the VeRA baseline branch for one layer.

    diag(b) @ B_sl @ diag(d) @ A_sl, reshaped from the (C_out*K, C_in*K)
    kernel-matrix convention to a (C_out, C_in, K, K) kernel.
    """
    if vec_set.variant != "vera":
        raise DomainError("materialize_vera_kernel expects a 'vera' set")
    k = layer.k
    d, b = vec_set.vectors[layer.name]
    a_sl, b_sl = slice_projections(proj, layer.c_in * k, layer.c_out * k)
    rk = d.shape[0]
    mat = (b[:, None] * b_sl[:, :rk]) @ (d[:, None] * a_sl[:rk, :])
    return mat.reshape(layer.c_out, k, layer.c_in, k).transpose(0, 2, 1, 3)


@dataclass
class LoRAPair:
    """Per-layer trainable (A, B) matrices in the full K x K kernel shapes."""

    a: dict  # layer name -> (r*K, C_in*K)
    b: dict  # layer name -> (C_out*K, r*K)
    rank: int


def init_lora_pair(model: ModelSpec, rank: int, seed: int) -> LoRAPair:
    """A from a scaled normal, B zero, so the branch starts as a zero map."""
    rng = make_rng(seed)
    a, b = {}, {}
    for layer in model.compensated_layers():
        k = layer.k
        a[layer.name] = rng.normal(0.0, 1.0 / np.sqrt(layer.c_in * k), size=(rank * k, layer.c_in * k))
        b[layer.name] = np.zeros((layer.c_out * k, rank * k))
    return LoRAPair(a=a, b=b, rank=rank)


def lora_forward(x: np.ndarray, layer: LayerSpec, pair: LoRAPair) -> np.ndarray:
    """B(Ax) in the kernel-matrix convention of the K x K form."""
    a, b = pair.a[layer.name], pair.b[layer.name]
    k = layer.k
    if layer.kind == "linear":
        if a.shape != (pair.rank, layer.c_in) or b.shape != (layer.c_out, pair.rank):
            raise DomainError(f"{layer.name}: LoRA shapes do not match the layer")
        return (x @ a.T) @ b.T
    mat = b @ a
    kernel = mat.reshape(layer.c_out, k, layer.c_in, k).transpose(0, 2, 1, 3)
    return conv_forward(x, kernel, layer.stride, layer.padding)


class ActiveCompensation:
    """Adapter handed to the model forward: one active set, frozen projections.

    For the VeRA baseline the dense kernels are materialized lazily once per
    (set, layer) and reused across mini-batches.
    """

    def __init__(self, proj: SharedProjections, vec_set: ScalingVectorSet):
        self.proj = proj
        self.set = vec_set
        self._kernels = {}

    def conv_delta(self, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
        if self.set.variant == "vera":
            key = layer.name
            if key not in self._kernels:
                self._kernels[key] = materialize_vera_kernel(layer, self.set, self.proj)
            return conv_forward(x, self._kernels[key], layer.stride, layer.padding)
        return pointwise_conv_compensation(x, layer, self.set, self.proj)

    def linear_delta(self, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
        if self.set.variant == "vera":
            d, b = self.set.vectors[layer.name]
            a_sl, b_sl = slice_projections(self.proj, layer.c_in, layer.c_out)
            rk = d.shape[0]
            return _apply_vectors(x, d, b, a_sl[:rk, :], b_sl[:, :rk])
        return vera_plus_forward(x, layer, self.set, self.proj)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def _comp_dims(topology) -> list:
    """Normalize a topology to (c_in, c_out, k) triples of compensated layers."""
    if isinstance(topology, ModelSpec):
        return [(l.c_in, l.c_out, l.k) for l in topology.compensated_layers()]
    dims = []
    for entry in topology:
        if isinstance(entry, dict):
            if entry.get("compensated", True):
                dims.append((int(entry["c_in"]), int(entry["c_out"]), int(entry["k"])))
        else:
            dims.append((int(entry[0]), int(entry[1]), int(entry[2])))
    if not dims:
        raise ConfigError("topology has no compensated layers")
    return dims


def count_shared_params(variant: str, topology, r: int) -> int:
    """Elements of the frozen projections (zero for lora/none)."""
    if variant in ("none", "lora"):
        return 0
    dims = _comp_dims(topology)
    d_in = max(c_in for c_in, _, _ in dims)
    d_out = max(c_out for _, c_out, _ in dims)
    k_max = max(k for _, _, k in dims)
    if variant == "vera_plus":
        return r * d_in + d_out * r
    rk = r * k_max
    return rk * (d_in * k_max) + (d_out * k_max) * rk


def count_per_set_params(variant: str, topology, r: int) -> int:
    """Elements of one drift level's trainable state."""
    if variant == "none":
        return 0
    dims = _comp_dims(topology)
    if variant == "lora":
        return sum(r * k * k * (c_in + c_out) for c_in, c_out, k in dims)
    if variant == "vera":
        return sum(r * k + c_out * k for _, c_out, k in dims)
    return sum(r + c_out for _, c_out, _ in dims)


def count_compensation_params(variant: str, topology, r: int, num_sets: int) -> int:
    """Total compensation parameters: shared projections + per-level vectors."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if num_sets < 0 or r < 1:
        raise DomainError("num_sets must be >= 0 and r >= 1")
    if variant == "none":
        return 0
    return count_shared_params(variant, topology, r) + num_sets * count_per_set_params(
        variant, topology, r
    )


# ---------------------------------------------------------------------------
# archive format
# ---------------------------------------------------------------------------

def save_archive(
    path: str,
    variant: str,
    rank: int,
    proj: SharedProjections,
    sets,
    provenance: dict | None = None,
    store_projection_bytes: bool = False,
) -> None:
    """Write the compensation archive.

    Projections are stored as (seed, dims) by default and regenerated on
    load, which is exact because initialization is deterministic; raw bytes
    can be embedded instead for archives that must outlive the generator.
    """
    blobs = BlobWriter()
    sets_doc = []
    for s in sorted(sets, key=lambda s: s.set_id):
        layers_doc = []
        for name in sorted(s.vectors):
            d, b = s.vectors[name]
            layers_doc.append(
                {
                    "name": name,
                    "d": blobs.add(np.ascontiguousarray(d, dtype="<f8").tobytes()),
                    "b": blobs.add(np.ascontiguousarray(b, dtype="<f8").tobytes()),
                }
            )
        sets_doc.append(
            {
                "set_id": s.set_id,
                "t_seconds": s.drift_time,
                "variant": s.variant,
                "layers": layers_doc,
            }
        )
    proj_doc = {
        "seed": proj.init_seed,
        "r": proj.r,
        "d_max_in": proj.d_max_in,
        "d_max_out": proj.d_max_out,
    }
    if store_projection_bytes:
        proj_doc["a_raw"] = blobs.add(np.ascontiguousarray(proj.a_max, dtype="<f8").tobytes())
        proj_doc["b_raw"] = blobs.add(np.ascontiguousarray(proj.b_max, dtype="<f8").tobytes())
    header = {
        "format_version": 1,
        "variant": variant,
        "rank": rank,
        "proj": proj_doc,
        "sets": sets_doc,
        "provenance": provenance or {},
    }
    write_container(path, ARCHIVE_MAGIC, header, blobs.payload())


def load_archive(path: str):
    """Read an archive; returns (variant, rank, proj, sets, provenance)."""
    header, payload = read_container(path, ARCHIVE_MAGIC)
    if header.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported archive version {header.get('format_version')}")
    pd = header["proj"]
    if "a_raw" in pd:
        a = np.frombuffer(read_blob(payload, pd["a_raw"], path), dtype="<f8").reshape(
            pd["r"], pd["d_max_in"]
        )
        b = np.frombuffer(read_blob(payload, pd["b_raw"], path), dtype="<f8").reshape(
            pd["d_max_out"], pd["r"]
        )
        proj = SharedProjections(a.copy(), b.copy(), int(pd["seed"]), int(pd["r"]))
    else:
        proj = init_shared_projections(pd["r"], pd["d_max_in"], pd["d_max_out"], pd["seed"])
    sets = []
    for sd in header["sets"]:
        vectors = {}
        for ld in sd["layers"]:
            d = np.frombuffer(read_blob(payload, ld["d"], path), dtype="<f8").copy()
            b = np.frombuffer(read_blob(payload, ld["b"], path), dtype="<f8").copy()
            vectors[ld["name"]] = (d, b)
        sets.append(
            ScalingVectorSet(
                drift_time=float(sd["t_seconds"]),
                set_id=int(sd["set_id"]),
                vectors=vectors,
                variant=sd.get("variant", header["variant"]),
            ).freeze()
        )
    return header["variant"], int(header["rank"]), proj, sets, header.get("provenance", {})
