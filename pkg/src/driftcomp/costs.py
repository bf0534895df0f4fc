"""Energy, operation, parameter, storage, and area accounting.

Conventions (stated in every emitted report):
  * one MAC counts as 2 ops; Hadamard products count 1 op per element;
  * backbone ops run in the nonvolatile array, compensation ops in the
    digital SRAM module;
  * TOPS/W means 1e12 ops per joule;
  * storage counts shared projections once plus per-level vectors times
    the number of sets, at ``bits_comp`` bits per parameter; weight data
    movement is one set's vectors plus the projections loaded on a switch;
  * 1 KB = 1024 bytes; area = bits / (density in Mb/mm^2 * 1e6), a density
    approximation, not a layout number.
"""

import json
from dataclasses import dataclass, field

from .compensation import (
    VARIANTS,
    count_compensation_params,
    count_per_set_params,
    count_shared_params,
)
from .errors import ConfigError, DomainError
from .model_zoo import ModelSpec

ALLOWED_COMP_BITS = (4, 8, 16, 32)


@dataclass(frozen=True)
class HardwareProfile:
    """Energy efficiency and memory density of the two compute fabrics."""

    tops_per_w_rram: float = 209.0
    tops_per_w_sram: float = 89.0
    density_rram: float = 2.53  # Mb / mm^2
    density_sram: float = 0.31

    def __post_init__(self):
        for name in ("tops_per_w_rram", "tops_per_w_sram", "density_rram", "density_sram"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")


@dataclass
class LayerDims:
    """Dimensions-only view of one compute layer."""

    name: str
    kind: str  # conv2d | linear
    c_in: int
    c_out: int
    k: int
    positions: int  # output spatial positions (1 for linear)
    compensated: bool = True


def topology_from_model(model: ModelSpec) -> list:
    dims = []
    shapes = model.infer_shapes()
    for layer, shape in zip(model.layers, shapes):
        if layer.kind == "conv2d":
            dims.append(
                LayerDims(layer.name, "conv2d", layer.c_in, layer.c_out, layer.k,
                          shape[1] * shape[2], layer.compensated)
            )
        elif layer.kind == "linear":
            dims.append(
                LayerDims(layer.name, "linear", layer.c_in, layer.c_out, 1, 1, layer.compensated)
            )
    return dims


def topology_from_manifest(doc: dict) -> list:
    try:
        dims = []
        for entry in doc["layers"]:
            kind = entry.get("kind", "conv2d")
            positions = 1 if kind == "linear" else int(entry["out_h"]) * int(entry["out_w"])
            dims.append(
                LayerDims(
                    name=entry["name"],
                    kind=kind,
                    c_in=int(entry["c_in"]),
                    c_out=int(entry["c_out"]),
                    k=int(entry.get("k", 1)),
                    positions=positions,
                    compensated=bool(entry.get("compensated", True)),
                )
            )
        if not dims:
            raise KeyError("layers")
        return dims
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad topology manifest: {exc}") from exc


def _normalize(topology) -> list:
    if isinstance(topology, ModelSpec):
        return topology_from_model(topology)
    if isinstance(topology, dict):
        return topology_from_manifest(topology)
    return list(topology)


def _comp_triples(dims) -> list:
    return [(d.c_in, d.c_out, d.k) for d in dims if d.compensated]


def backbone_params(topology) -> int:
    dims = _normalize(topology)
    return sum(d.k * d.k * d.c_in * d.c_out for d in dims)


def backbone_macs(topology) -> int:
    dims = _normalize(topology)
    return sum(d.k * d.k * d.c_in * d.c_out * d.positions for d in dims)


def energy_estimate(ops_rram: float, ops_sram: float, profile: HardwareProfile) -> float:
    """Joules: ops / (TOPS/W * 1e12) summed over the two fabrics."""
    if ops_rram < 0 or ops_sram < 0:
        raise DomainError("operation counts must be nonnegative")
    return ops_rram / (profile.tops_per_w_rram * 1e12) + ops_sram / (
        profile.tops_per_w_sram * 1e12
    )


def count_model_ops(topology, variant: str, r: int) -> tuple:
    """(ops_rram, ops_sram) for one inference pass; MAC = 2 ops."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    dims = _normalize(topology)
    ops_rram = 2 * backbone_macs(dims)
    if variant == "none":
        return ops_rram, 0
    ops_sram = 0
    for d in dims:
        if not d.compensated:
            continue
        if variant == "vera_plus":
            macs = r * (d.c_in + d.c_out)
            hadamard = r + d.c_out
        else:  # lora and vera share the full-kernel product shapes
            macs = r * d.k * d.k * (d.c_in + d.c_out)
            hadamard = (r * d.k + d.c_out * d.k) if variant == "vera" else 0
        ops_sram += d.positions * (2 * macs + hadamard)
    return ops_rram, ops_sram


def area_estimate(storage_bits_rram: float, storage_bits_sram: float, profile: HardwareProfile) -> float:
    """Approximate mm^2 from memory densities (Mb/mm^2, Mb = 1e6 bits)."""
    if storage_bits_rram < 0 or storage_bits_sram < 0:
        raise DomainError("bit counts must be nonnegative")
    return storage_bits_rram / 1e6 / profile.density_rram + storage_bits_sram / 1e6 / profile.density_sram


def _ceil_bytes(nbits: int) -> int:
    return (nbits + 7) // 8


def storage_report(variant: str, topology, r: int, num_sets: int, bits_comp: int = 16) -> dict:
    """Bytes in the archive and bytes moved on an active-set switch."""
    if bits_comp not in ALLOWED_COMP_BITS:
        raise ConfigError(f"bits_comp must be one of {ALLOWED_COMP_BITS}")
    if num_sets < 0:
        raise DomainError("num_sets must be nonnegative")
    triples = _comp_triples(_normalize(topology))
    shared = count_shared_params(variant, triples, r)
    per_set = count_per_set_params(variant, triples, r)
    total = shared + num_sets * per_set
    return {
        "params_shared": shared,
        "params_per_set": per_set,
        "params_comp": total,
        "storage_comp_bytes": _ceil_bytes(total * bits_comp),
        "weight_movement_bytes": _ceil_bytes((per_set + shared) * bits_comp),
        "bits_comp": bits_comp,
    }


@dataclass
class CostReport:
    variant: str
    r: int
    num_sets: int
    ops_rram: int
    ops_sram: int
    energy_j: float
    energy_overhead_pct: float
    params_backbone: int
    params_comp: int
    params_overhead_pct: float
    ops_overhead_pct: float
    storage_comp_bytes: int
    weight_movement_bytes: int
    area_mm2: float
    conventions: dict = field(default_factory=dict)

    def csv_row(self) -> dict:
        return {
            "variant": self.variant,
            "r": self.r,
            "num_sets": self.num_sets,
            "ops_rram": self.ops_rram,
            "ops_sram": self.ops_sram,
            "energy_j": self.energy_j,
            "params_pct": round(self.params_overhead_pct, 1),
            "ops_pct": round(self.ops_overhead_pct, 1),
            "storage_kb": self.storage_comp_bytes / 1024.0,
            "movement_kb": self.weight_movement_bytes / 1024.0,
            "area_mm2": self.area_mm2,
        }


def cost_report(
    topology,
    variant: str,
    r: int,
    num_sets: int,
    profile: HardwareProfile | None = None,
    weight_bits: int = 4,
    bits_comp: int = 16,
) -> CostReport:
    """Full accounting for one (variant, rank, set count) configuration.

    The SRAM area term assumes the digital module holds the shared
    projections plus one active set; the full archive lives off-chip.
    """
    profile = profile or HardwareProfile()
    dims = _normalize(topology)
    ops_rram, ops_sram = count_model_ops(dims, variant, r)
    storage = storage_report(variant, dims, r, num_sets, bits_comp)
    p_backbone = backbone_params(dims)
    energy = energy_estimate(ops_rram, ops_sram, profile)
    e_rram = energy_estimate(ops_rram, 0, profile)
    sram_resident_bits = (storage["params_shared"] + storage["params_per_set"]) * bits_comp
    area = area_estimate(p_backbone * weight_bits, sram_resident_bits, profile)
    return CostReport(
        variant=variant,
        r=r,
        num_sets=num_sets,
        ops_rram=ops_rram,
        ops_sram=ops_sram,
        energy_j=energy,
        energy_overhead_pct=100.0 * (energy - e_rram) / e_rram if e_rram else 0.0,
        params_backbone=p_backbone,
        params_comp=storage["params_comp"],
        params_overhead_pct=100.0 * storage["params_comp"] / p_backbone,
        ops_overhead_pct=100.0 * ops_sram / ops_rram if ops_rram else 0.0,
        storage_comp_bytes=storage["storage_comp_bytes"],
        weight_movement_bytes=storage["weight_movement_bytes"],
        area_mm2=area,
        conventions={
            "mac_ops": 2,
            "hadamard_ops_per_element": 1,
            "bits_comp": bits_comp,
            "weight_bits": weight_bits,
            "kb": 1024,
            "sram_area_holds": "shared projections + one active set",
        },
    )


COST_CSV_HEADER = [
    "variant",
    "r",
    "num_sets",
    "ops_rram",
    "ops_sram",
    "energy_j",
    "params_pct",
    "ops_pct",
    "storage_kb",
    "movement_kb",
    "area_mm2",
]

PARAMS_CSV_HEADER = [
    "variant",
    "r",
    "num_sets",
    "params",
    "params_overhead_pct",
    "ops",
    "ops_overhead_pct",
]


def params_csv_row(report: CostReport) -> dict:
    return {
        "variant": report.variant,
        "r": report.r,
        "num_sets": report.num_sets,
        "params": report.params_comp,
        "params_overhead_pct": round(report.params_overhead_pct, 1),
        "ops": report.ops_sram,
        "ops_overhead_pct": round(report.ops_overhead_pct, 1),
    }


def load_topology_manifest(path: str) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid topology JSON: {exc}") from exc
    return topology_from_manifest(doc)
