"""Desk-scale networks, their forward semantics, and datasets.

Models are flat layer lists (conv / relu / residual-add / pool / linear)
small enough to train on a laptop CPU yet deep enough to show measurable
accuracy loss under conductance drift. Convolution runs as im2col + GEMM.
Residual shortcuts are parameter-free (spatial subsampling plus channel
zero-padding) so every convolution keeps a 3x3 kernel.

No batch normalization: inference pipelines fold BN into weights anyway,
and leaving it out avoids modelling drift of BN statistics.
"""

from dataclasses import dataclass, asdict

import numpy as np

from .errors import DomainError, FormatError
from .quant import fake_quant_activation
from .rng import make_rng

LAYER_KINDS = ("conv2d", "linear", "residual-add", "relu", "global-avg-pool")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    c_in: int = 0
    c_out: int = 0
    k: int = 0
    stride: int = 1
    padding: int = 0
    compensated: bool = False
    source: int | None = None  # residual-add: index of the branch layer

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise DomainError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "linear") and (self.c_in <= 0 or self.c_out <= 0):
            raise DomainError(f"{self.name}: channel dims must be positive")
        if self.kind == "conv2d" and (self.k <= 0 or self.stride <= 0):
            raise DomainError(f"{self.name}: kernel/stride must be positive")
        if self.kind == "residual-add" and self.source is None:
            raise DomainError(f"{self.name}: residual-add needs a source index")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple  # (C, H, W)
    classes: int

    def __post_init__(self):
        if self.classes < 2:
            raise DomainError("need at least 2 classes")
        self.infer_shapes()  # raises on inconsistent wiring

    def infer_shapes(self) -> list:
        """Output shape after each layer; validates the whole chain."""
        shapes = []
        cur = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv2d":
                c, h, w = cur
                if c != layer.c_in:
                    raise DomainError(f"{layer.name}: expects C_in={layer.c_in}, got {c}")
                ho = (h + 2 * layer.padding - layer.k) // layer.stride + 1
                wo = (w + 2 * layer.padding - layer.k) // layer.stride + 1
                if ho <= 0 or wo <= 0:
                    raise DomainError(f"{layer.name}: output spatial dims collapse")
                cur = (layer.c_out, ho, wo)
            elif layer.kind == "relu":
                pass
            elif layer.kind == "residual-add":
                src = layer.source
                if not (0 <= src < i):
                    raise DomainError(f"{layer.name}: source {src} out of range")
                _shortcut_factor(shapes[src], cur, layer.name)
            elif layer.kind == "global-avg-pool":
                cur = (cur[0],)
            elif layer.kind == "linear":
                if len(cur) != 1 or cur[0] != layer.c_in:
                    raise DomainError(f"{layer.name}: expects a length-{layer.c_in} vector")
                cur = (layer.c_out,)
            shapes.append(cur)
        if cur != (self.classes,):
            raise DomainError("model must end in a linear layer over the classes")
        return shapes

    def compensated_layers(self) -> list:
        return [l for l in self.layers if l.compensated]

    def to_manifest(self) -> dict:
        return {
            "input": list(self.input_shape),
            "classes": self.classes,
            "layers": [asdict(l) for l in self.layers],
        }

    @staticmethod
    def from_manifest(doc: dict) -> "ModelSpec":
        try:
            layers = tuple(LayerSpec(**entry) for entry in doc["layers"])
            return ModelSpec(
                layers=layers,
                input_shape=tuple(doc["input"]),
                classes=int(doc["classes"]),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad model manifest: {exc}") from exc


def _shortcut_factor(src_shape: tuple, dst_shape: tuple, name: str) -> int:
    """Subsampling factor of a parameter-free shortcut; validates shapes."""
    if len(src_shape) != 3 or len(dst_shape) != 3:
        raise DomainError(f"{name}: residual branches must be feature maps")
    cs, hs, ws = src_shape
    cd, hd, wd = dst_shape
    if cs > cd:
        raise DomainError(f"{name}: shortcut cannot drop channels ({cs}->{cd})")
    if hs == hd and ws == wd:
        return 1
    f = round(hs / hd)
    if f < 1 or -(-hs // f) != hd or -(-ws // f) != wd:
        raise DomainError(f"{name}: no integer subsampling maps {src_shape} onto {dst_shape}")
    return f


def shortcut_project(x_src: np.ndarray, dst_shape: tuple, name: str = "residual") -> np.ndarray:
    """Parameter-free shortcut: subsample spatially, zero-pad channels."""
    f = _shortcut_factor(x_src.shape[1:], dst_shape, name)
    out = x_src[:, :, ::f, ::f] if f > 1 else x_src
    cd = dst_shape[0]
    if out.shape[1] < cd:
        padded = np.zeros((out.shape[0], cd) + out.shape[2:], dtype=out.dtype)
        padded[:, : out.shape[1]] = out
        out = padded
    return out


def build_toy_resnet(
    width: int = 8,
    blocks: int = 1,
    classes: int = 10,
    in_channels: int = 3,
    input_hw: int = 16,
) -> ModelSpec:
    """Three-stage residual CNN with channel doubling and stride-2 transitions.

    All convolutions are 3x3 and compensated; the classifier head is a
    compensated linear layer. Shortcuts are parameter-free.
    """
    if width < 4 or blocks < 1:
        raise DomainError("width must be >= 4 and blocks >= 1")
    layers = []
    layers.append(LayerSpec("conv2d", "stem", in_channels, width, 3, 1, 1, True))
    layers.append(LayerSpec("relu", "stem_relu"))
    c_prev = width
    for stage in range(3):
        c = width * (2**stage)
        for b in range(blocks):
            stride = 2 if (stage > 0 and b == 0) else 1
            src = len(layers) - 1  # output feeding this block
            layers.append(
                LayerSpec("conv2d", f"s{stage + 1}b{b + 1}c1", c_prev, c, 3, stride, 1, True)
            )
            layers.append(LayerSpec("relu", f"s{stage + 1}b{b + 1}r1"))
            layers.append(LayerSpec("conv2d", f"s{stage + 1}b{b + 1}c2", c, c, 3, 1, 1, True))
            layers.append(
                LayerSpec("residual-add", f"s{stage + 1}b{b + 1}add", source=src)
            )
            layers.append(LayerSpec("relu", f"s{stage + 1}b{b + 1}r2"))
            c_prev = c
    layers.append(LayerSpec("global-avg-pool", "pool"))
    layers.append(LayerSpec("linear", "head", c_prev, classes, 1, compensated=True))
    return ModelSpec(tuple(layers), (in_channels, input_hw, input_hw), classes)


def count_backbone_params(model: ModelSpec, include_bias: bool = False) -> int:
    total = 0
    for layer in model.layers:
        if layer.kind == "conv2d":
            total += layer.k * layer.k * layer.c_in * layer.c_out
        elif layer.kind == "linear":
            total += layer.c_in * layer.c_out
            if include_bias:
                total += layer.c_out
    return total


# ---------------------------------------------------------------------------
# convolution primitives (im2col + GEMM)
# ---------------------------------------------------------------------------

def im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Flatten conv windows: (N,C,H,W) -> (N*Ho*Wo, C*k*k), plus (Ho, Wo)."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, k, k),
        strides=(s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
        writeable=False,
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return np.ascontiguousarray(cols), (ho, wo)


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int, return_cols: bool = False):
    """Cross-correlation with kernel w (C_out, C_in, K, K)."""
    n = x.shape[0]
    c_out, _, k, _ = w.shape
    cols, (ho, wo) = im2col(x, k, stride, pad)
    out2d = cols @ w.reshape(c_out, -1).T
    out = out2d.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if return_cols:
        return out, cols
    return out


def conv_input_grad(dz: np.ndarray, w: np.ndarray, stride: int, pad: int, x_hw: tuple) -> np.ndarray:
    """Gradient of conv_forward w.r.t. its input."""
    n, c_out, ho, wo = dz.shape
    c_in = w.shape[1]
    k = w.shape[2]
    h, wd = x_hw
    if stride > 1:
        up = np.zeros((n, c_out, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=dz.dtype)
        up[:, :, ::stride, ::stride] = dz
    else:
        up = dz
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    full = conv_forward(up, w_flip, stride=1, pad=k - 1)
    dx = np.zeros((n, c_in, h, wd), dtype=dz.dtype)
    hh = min(h, full.shape[2] - pad)
    ww = min(wd, full.shape[3] - pad)
    dx[:, :, :hh, :ww] = full[:, :, pad : pad + hh, pad : pad + ww]
    return dx


def conv_weight_grad(dz: np.ndarray, cols: np.ndarray, w_shape: tuple) -> np.ndarray:
    """Gradient of conv_forward w.r.t. the kernel, from cached im2col columns."""
    c_out = w_shape[0]
    dz2d = dz.transpose(0, 2, 3, 1).reshape(-1, c_out)
    return (dz2d.T @ cols).reshape(w_shape)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

_ACT_AXES = {4: (1, 2, 3), 2: (1,)}  # by input ndim


def _quant_input(h: np.ndarray, act_bits: int | None) -> np.ndarray:
    if act_bits is None:
        return h
    return fake_quant_activation(h, act_bits, axis=_ACT_AXES[h.ndim])


def forward(
    model: ModelSpec,
    weights: dict,
    biases: dict,
    x: np.ndarray,
    comp=None,
    act_bits: int | None = None,
    cache: str | None = None,
):
    """Run the network; returns logits, or (logits, cache_list) when caching.

    ``comp`` is any object exposing ``conv_delta(layer, x_q)`` and
    ``linear_delta(layer, x_q)``; its output is added to the pre-activation
    of each compensated layer. Activations entering conv/linear layers are
    fake-quantized per sample when ``act_bits`` is set.

    ``cache``: None, "comp" (inputs/outputs for compensation training) or
    "full" (adds im2col columns for backbone training).
    """
    records = [] if cache else None
    outputs = []
    needed = {l.source for l in model.layers if l.kind == "residual-add"}
    h = x
    for i, layer in enumerate(model.layers):
        rec = {"layer": layer} if cache else None
        if layer.kind == "conv2d":
            xq = _quant_input(h, act_bits)
            wgt = weights[layer.name]
            if cache == "full":
                out, cols = conv_forward(xq, wgt, layer.stride, layer.padding, return_cols=True)
                rec["cols"] = cols
            else:
                out = conv_forward(xq, wgt, layer.stride, layer.padding)
            if layer.compensated and comp is not None:
                delta = comp.conv_delta(layer, xq)
                if delta.shape != out.shape:
                    raise DomainError(
                        f"{layer.name}: compensation shape {delta.shape} != backbone {out.shape}"
                    )
                out = out + delta
            if rec is not None:
                rec["x"] = xq
        elif layer.kind == "relu":
            out = np.maximum(h, 0)
            if rec is not None:
                rec["x"] = h
        elif layer.kind == "residual-add":
            out = h + shortcut_project(outputs[layer.source], h.shape[1:], layer.name)
            if rec is not None:
                rec["x"] = h
        elif layer.kind == "global-avg-pool":
            out = h.mean(axis=(2, 3))
            if rec is not None:
                rec["x_shape"] = h.shape
        elif layer.kind == "linear":
            xq = _quant_input(h, act_bits)
            out = xq @ weights[layer.name].T
            if layer.name in biases:
                out = out + biases[layer.name]
            if layer.compensated and comp is not None:
                delta = comp.linear_delta(layer, xq)
                if delta.shape != out.shape:
                    raise DomainError(
                        f"{layer.name}: compensation shape {delta.shape} != backbone {out.shape}"
                    )
                out = out + delta
            if rec is not None:
                rec["x"] = xq
        outputs.append(out if (cache or i in needed) else None)
        if rec is not None:
            rec["out"] = out
            records.append(rec)
        h = out
    if cache:
        return h, records
    return h


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    """Images in [0,1], CHW layout, with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DomainError("images/labels length mismatch")
        if self.labels.size and self.labels.max() >= self.n_classes:
            raise DomainError("label exceeds class count")

    def __len__(self) -> int:
        return len(self.labels)


def _box_blur(images: np.ndarray) -> np.ndarray:
    """3x3 box blur with edge replication, applied over the last two axes."""
    padded = np.pad(images, [(0, 0)] * (images.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    out = np.zeros_like(images)
    for dy in range(3):
        for dx in range(3):
            out += padded[..., dy : dy + images.shape[-2], dx : dx + images.shape[-1]]
    return out / 9.0


def make_synthetic_dataset(
    classes: int,
    n: int,
    input_shape: tuple = (3, 16, 16),
    seed: int = 0,
    noise: float = 0.3,
    amplitude: float = 0.3,
    eval_fraction: float = 1 / 9,
):
    """Class-conditional Gaussian-blob images, balanced, split train/eval.

    Per-class mean patterns are smoothed Gaussian fields, orthogonalized
    across classes and rescaled to ``amplitude`` around mid-gray; samples
    add pixel-wise Gaussian noise and clip to [0,1].
    """
    if n < classes:
        raise DomainError("need at least one sample per class")
    rng = make_rng(seed)
    c, h, w = input_shape
    base = rng.normal(0.0, 1.0, size=(classes, c, h, w))
    base = _box_blur(_box_blur(base))
    flat = base.reshape(classes, -1)
    flat -= flat.mean(axis=1, keepdims=True)
    q, _ = np.linalg.qr(flat.T)  # orthogonal class directions: maximal separation
    base = q.T[:classes].reshape(classes, c, h, w)
    peak = np.abs(base).max(axis=(1, 2, 3), keepdims=True)
    patterns = 0.5 + amplitude * base / peak
    labels = np.arange(n, dtype=np.int64) % classes
    order = rng.permutation(n)
    labels = labels[order]
    images = patterns[labels]
    if noise > 0:
        images = images + rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    n_eval = max(1, int(round(n * eval_fraction)))
    train = LabeledDataset(images[n_eval:], labels[n_eval:], classes, "train")
    evl = LabeledDataset(images[:n_eval], labels[:n_eval], classes, "eval")
    return train, evl


def load_binary_images(path: str, meta: dict) -> LabeledDataset:
    """Parse the fixed-record binary format: 1 label byte + C*H*W pixel bytes.

    Channels are planar, rows major; pixels scale to [0,1]. Raises
    FormatError with a byte offset on truncation or out-of-range labels.
    """
    try:
        c, h, w = (int(v) for v in meta["shape"])
        classes = int(meta["classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"dataset metadata missing shape/classes: {exc}") from exc
    record = 1 + c * h * w
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % record != 0:
        raise FormatError(
            f"{path}: length {len(raw)} is not a multiple of the record size "
            f"{record} (1 label byte + {c}*{h}*{w} pixels); first partial record "
            f"at byte offset {len(raw) - len(raw) % record}"
        )
    count = len(raw) // record
    if count == 0:
        return LabeledDataset(np.zeros((0, c, h, w)), np.zeros(0, dtype=np.int64), classes, "eval")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(count, record)
    labels = arr[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= classes)[0]
    if bad.size:
        idx = int(bad[0])
        raise FormatError(
            f"{path}: label {labels[idx]} >= {classes} classes at byte offset {idx * record}"
        )
    images = arr[:, 1:].reshape(count, c, h, w).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, classes, meta.get("split", "eval"))


def save_binary_images(dataset: LabeledDataset, path: str) -> dict:
    """Write the fixed-record binary format; returns the metadata manifest."""
    n, c, h, w = dataset.images.shape
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        for i in range(n):
            fh.write(bytes([int(dataset.labels[i])]))
            fh.write(pixels[i].tobytes())
    return {"classes": dataset.n_classes, "shape": [c, h, w], "count": n, "format_version": 1}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_accuracy(
    model: ModelSpec,
    weights: dict,
    biases: dict,
    dataset: LabeledDataset,
    comp=None,
    act_bits: int | None = None,
    batch: int = 256,
) -> float:
    """Top-1 accuracy in [0,1]; invariant to dataset ordering and batching."""
    if len(dataset) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    hits = 0
    for start in range(0, len(dataset), batch):
        xb = dataset.images[start : start + batch]
        logits = forward(model, weights, biases, xb, comp=comp, act_bits=act_bits)
        hits += int((np.argmax(logits, axis=1) == dataset.labels[start : start + batch]).sum())
    return hits / len(dataset)


def normalized_accuracy(accuracy: float, drift_free_accuracy: float) -> float:
    """Accuracy relative to the drift-free reference of the same model."""
    if drift_free_accuracy <= 0:
        raise DomainError("drift-free reference accuracy must be positive")
    return accuracy / drift_free_accuracy
