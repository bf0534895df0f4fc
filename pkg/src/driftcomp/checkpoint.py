"""Backbone checkpoint container: quantized weights frozen at time zero.

Per-layer records hold (name, shape, bits, scale(s), codes as signed
bytes); the header embeds the model topology manifest so a checkpoint is
self-describing. Biases stay in float64 on the digital side: they are not
conductance-mapped and therefore never drift.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .container import BlobWriter, read_blob, read_container, write_container
from .errors import FormatError
from .model_zoo import ModelSpec
from .quant import QuantScheme, QuantizedTensor, calibrate_scale, dequantize, quantize

CHECKPOINT_MAGIC = b"DCCKPT01"


@dataclass
class BackboneCheckpoint:
    model: ModelSpec
    weights: dict  # layer name -> QuantizedTensor
    biases: dict  # layer name -> float64 array
    scheme: QuantScheme

    def dequantized(self, dtype=np.float64) -> dict:
        return {name: dequantize(q).astype(dtype) for name, q in self.weights.items()}


def quantize_backbone(
    model: ModelSpec, fp_weights: dict, biases: dict, scheme: QuantScheme
) -> BackboneCheckpoint:
    """Post-training quantization of full-precision weights."""
    weights = {}
    for layer in model.layers:
        if layer.kind not in ("conv2d", "linear"):
            continue
        w = fp_weights[layer.name]
        scale = calibrate_scale(w, scheme)
        weights[layer.name] = quantize(w, scale, scheme)
    return BackboneCheckpoint(
        model=model,
        weights=weights,
        biases={k: np.asarray(v, dtype=np.float64) for k, v in biases.items()},
        scheme=scheme,
    )


def save_checkpoint(path: str, ckpt: BackboneCheckpoint, provenance: dict | None = None) -> None:
    blobs = BlobWriter()
    layers_doc = []
    for name in sorted(ckpt.weights):
        q = ckpt.weights[name]
        scale = q.scale.tolist() if q.scale.ndim else float(q.scale)
        layers_doc.append(
            {
                "name": name,
                "shape": list(q.shape),
                "bits": q.bits,
                "scale": scale,
                "codes": blobs.add(np.ascontiguousarray(q.codes, dtype=np.int8).tobytes()),
            }
        )
    biases_doc = []
    for name in sorted(ckpt.biases):
        b = ckpt.biases[name]
        biases_doc.append(
            {
                "name": name,
                "shape": list(b.shape),
                "data": blobs.add(np.ascontiguousarray(b, dtype="<f8").tobytes()),
            }
        )
    header = {
        "format_version": 1,
        "model": ckpt.model.to_manifest(),
        "scheme": asdict(ckpt.scheme),
        "layers": layers_doc,
        "biases": biases_doc,
        "provenance": provenance or {},
    }
    write_container(path, CHECKPOINT_MAGIC, header, blobs.payload())


def load_checkpoint(path: str) -> BackboneCheckpoint:
    header, payload = read_container(path, CHECKPOINT_MAGIC)
    if header.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    model = ModelSpec.from_manifest(header["model"])
    scheme = QuantScheme(**header["scheme"])
    weights = {}
    for rec in header["layers"]:
        codes = np.frombuffer(read_blob(payload, rec["codes"], path), dtype=np.int8)
        expect = int(np.prod(rec["shape"]))
        if codes.size != expect:
            raise FormatError(f"{path}: layer {rec['name']} has {codes.size} codes, wants {expect}")
        weights[rec["name"]] = QuantizedTensor(
            codes=codes.reshape(rec["shape"]).copy(),
            scale=np.asarray(rec["scale"], dtype=np.float64),
            bits=int(rec["bits"]),
        )
    biases = {}
    for rec in header["biases"]:
        data = np.frombuffer(read_blob(payload, rec["data"], path), dtype="<f8")
        biases[rec["name"]] = data.reshape(rec["shape"]).copy()
    return BackboneCheckpoint(model=model, weights=weights, biases=biases, scheme=scheme)
