"""Training of drift-compensation vectors and the toy backbone.

The compensation trainer freezes everything except one ScalingVectorSet:
each mini-batch samples a fresh drift instance, runs the forward pass with
the drifted backbone, and updates only (d_vec, b_vec) from exact analytic
gradients. Gradients and losses accumulate in float64 so they can be
checked against central finite differences tightly.

Activation fake-quantization is handled with a straight-through estimator.
Because activation scales come from the live max, values never leave the
clip range and the pass-through gradient is exact there by convention.
"""

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import BackboneCheckpoint, quantize_backbone
from .compensation import (
    ActiveCompensation,
    CompensationConfig,
    ScalingVectorSet,
    SharedProjections,
    materialize_vera_kernel,
    new_scaling_set,
    slice_projections,
)
from .drift import ConductanceMap, DriftModel, DriftedWeights, PreparedBackbone, inject_drift
from .errors import ConfigError, DomainError
from .model_zoo import (
    LabeledDataset,
    ModelSpec,
    conv_input_grad,
    conv_weight_grad,
    forward,
    im2col,
)
from .quant import QuantScheme
from .rng import child_seed, make_rng

OPTIMIZERS = ("sgd", "sgd-momentum", "adam")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    seed: int = 0
    warm_start: bool = False
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; one of {OPTIMIZERS}")


@dataclass
class GradientSet:
    """Per-layer (grad_d_vec, grad_b_vec), mirroring a ScalingVectorSet."""

    vectors: dict

    def norm_d(self) -> float:
        return math.sqrt(sum(float(np.sum(g[0] ** 2)) for g in self.vectors.values()))

    def norm_b(self) -> float:
        return math.sqrt(sum(float(np.sum(g[1] ** 2)) for g in self.vectors.values()))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def loss_cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy, stabilized by max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise DomainError("logits must be finite")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim == 1:
        logits = logits[None, :]
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def _loss_and_dlogits(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = len(labels)
    idx = np.arange(n)
    loss = float(np.mean(np.log(ez.sum(axis=1)) - z[idx, labels]))
    dlogits = probs.copy()
    dlogits[idx, labels] -= 1.0
    return loss, dlogits / n


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _shortcut_backward(g: np.ndarray, src_shape: tuple) -> np.ndarray:
    """Adjoint of shortcut_project: strip channel padding, spread stride."""
    cs, hs, ws = src_shape
    stripped = g[:, :cs]
    if g.shape[2] == hs and g.shape[3] == ws:
        return stripped
    f = round(hs / g.shape[2])
    out = np.zeros((g.shape[0],) + src_shape, dtype=g.dtype)
    out[:, :, ::f, ::f] = stripped
    return out


def _branch_backward_2d(g2d, x2d, d, b, a_sl, b_sl):
    """Gradients of b*(B(d*(Ax))) w.r.t. d, b and x, rows batched."""
    u1 = x2d @ a_sl.T
    u2 = u1 * d
    v = u2 @ b_sl.T
    gb = np.einsum("nc,nc->c", g2d, v)
    gv = g2d * b
    du2 = gv @ b_sl
    gd = np.einsum("nr,nr->r", du2, u1)
    dx = (du2 * d) @ a_sl
    return gd, gb, dx


def _vera_kernel_grads(gker, d, b, a_sl, b_sl, layer):
    """Gradients of the materialized K x K VeRA kernel w.r.t. d and b."""
    k = layer.k
    gmat = gker.transpose(0, 2, 1, 3).reshape(layer.c_out * k, layer.c_in * k)
    rk = d.shape[0]
    a = a_sl[:rk, :]
    bm = b_sl[:, :rk]
    inner = bm @ (d[:, None] * a)  # B diag(d) A
    gb = np.einsum("ij,ij->i", gmat, inner)
    tmp = (b[:, None] * bm).T @ gmat
    gd = np.einsum("rj,rj->r", tmp, a)
    return gd, gb


def backprop(
    model: ModelSpec,
    weights: dict,
    biases: dict,
    cache: list,
    dlogits: np.ndarray,
    comp: ActiveCompensation | None = None,
    want_weight_grads: bool = False,
):
    """Reverse walk over a cached forward pass.

    Returns (GradientSet or None, weight-grad dict or None). The weight
    grads use keys "w:<layer>" and "bias:<layer>".
    """
    n_layers = len(cache)
    pending = [None] * n_layers
    vec_grads = {} if comp is not None else None
    w_grads = {} if want_weight_grads else None
    g = dlogits
    for i in reversed(range(n_layers)):
        rec = cache[i]
        layer = rec["layer"]
        if pending[i] is not None:
            g = g + pending[i]
        if layer.kind == "linear":
            xq = rec["x"]
            if want_weight_grads:
                w_grads["w:" + layer.name] = g.T @ xq
                if layer.name in biases:
                    w_grads["bias:" + layer.name] = g.sum(axis=0)
            dx = g @ weights[layer.name]
            if comp is not None and layer.compensated:
                d, b = comp.set.vectors[layer.name]
                rk = d.shape[0]
                a_sl, b_sl = slice_projections(comp.proj, layer.c_in, layer.c_out)
                gd, gb, dxb = _branch_backward_2d(g, xq, d, b, a_sl[:rk, :], b_sl[:, :rk])
                vec_grads[layer.name] = (gd, gb)
                dx = dx + dxb
            g = dx
        elif layer.kind == "relu":
            g = g * (rec["x"] > 0)
        elif layer.kind == "residual-add":
            src = layer.source
            gsrc = _shortcut_backward(g, cache[src]["out"].shape[1:])
            pending[src] = gsrc if pending[src] is None else pending[src] + gsrc
        elif layer.kind == "global-avg-pool":
            n, c, h, w = rec["x_shape"]
            g = np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w))
        elif layer.kind == "conv2d":
            xq = rec["x"]
            wgt = weights[layer.name]
            if want_weight_grads:
                cols = rec.get("cols")
                if cols is None:
                    cols, _ = im2col(xq, layer.k, layer.stride, layer.padding)
                w_grads["w:" + layer.name] = conv_weight_grad(g, cols, wgt.shape)
            dx = conv_input_grad(g, wgt, layer.stride, layer.padding, xq.shape[2:])
            if comp is not None and layer.compensated:
                d, b = comp.set.vectors[layer.name]
                if comp.set.variant == "vera":
                    cols = rec.get("cols")
                    if cols is None:
                        cols, _ = im2col(xq, layer.k, layer.stride, layer.padding)
                    kernel = materialize_vera_kernel(layer, comp.set, comp.proj)
                    gker = conv_weight_grad(g, cols, kernel.shape)
                    a_sl, b_sl = slice_projections(
                        comp.proj, layer.c_in * layer.k, layer.c_out * layer.k
                    )
                    gd, gb = _vera_kernel_grads(gker, d, b, a_sl, b_sl, layer)
                    dx = dx + conv_input_grad(
                        g, kernel, layer.stride, layer.padding, xq.shape[2:]
                    )
                else:
                    xs = xq[:, :, :: layer.stride, :: layer.stride]
                    x2d = xs.transpose(0, 2, 3, 1).reshape(-1, layer.c_in)
                    g2d = g.transpose(0, 2, 3, 1).reshape(-1, layer.c_out)
                    a_sl, b_sl = slice_projections(comp.proj, layer.c_in, layer.c_out)
                    gd, gb, dxb2d = _branch_backward_2d(g2d, x2d, d, b, a_sl, b_sl)
                    dxb = dxb2d.reshape(xs.shape[0], xs.shape[2], xs.shape[3], layer.c_in)
                    dx[:, :, :: layer.stride, :: layer.stride] += dxb.transpose(0, 3, 1, 2)
                vec_grads[layer.name] = (gd, gb)
            g = dx
    gset = GradientSet(vec_grads) if comp is not None else None
    return gset, w_grads


def forward_with_drift(
    model: ModelSpec,
    drifted: DriftedWeights,
    vec_set: ScalingVectorSet | None,
    proj: SharedProjections | None,
    x: np.ndarray,
    biases: dict | None = None,
    act_bits: int | None = None,
):
    """Inference with a drifted backbone plus the optional compensation branch."""
    comp = ActiveCompensation(proj, vec_set) if vec_set is not None else None
    return forward(model, drifted.values, biases or {}, x, comp=comp, act_bits=act_bits)


def backward_scaling_vectors(
    model: ModelSpec,
    drifted: DriftedWeights,
    vec_set: ScalingVectorSet,
    proj: SharedProjections,
    batch,
    biases: dict | None = None,
    act_bits: int | None = None,
) -> GradientSet:
    """Exact batch-loss gradients for every (d_vec, b_vec).

    The backbone, projections, and quantizer scales receive no updates;
    activation fake-quantization is treated straight-through.
    """
    x, labels = batch
    comp = ActiveCompensation(proj, vec_set)
    logits, cache = forward(
        model, drifted.values, biases or {}, x, comp=comp, act_bits=act_bits, cache="comp"
    )
    _, dlogits = _loss_and_dlogits(logits, np.asarray(labels, dtype=np.int64))
    gset, _ = backprop(model, drifted.values, biases or {}, cache, dlogits, comp=comp)
    return gset


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Optimizer:
    def step(self, params: dict, grads: dict) -> None:
        raise NotImplementedError


class Sgd(Optimizer):
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, grads):
        for key, p in params.items():
            g = grads[key]
            if self.momentum:
                v = self.velocity.get(key)
                v = g if v is None else self.momentum * v + g
                self.velocity[key] = v
                g = v
            p -= self.lr * g


class Adam(Optimizer):
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for key, p in params.items():
            g = grads[key]
            m = self.m.get(key, 0.0)
            v = self.v.get(key, 0.0)
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[key] = m
            self.v[key] = v
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate)
    if cfg.optimizer == "sgd-momentum":
        return Sgd(cfg.learning_rate, cfg.momentum)
    return Sgd(cfg.learning_rate)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# compensation training
# ---------------------------------------------------------------------------

def train_set_at_time(
    t: float,
    backbone: BackboneCheckpoint,
    proj: SharedProjections,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    drift_model: DriftModel,
    cmap: ConductanceMap | None = None,
    comp_cfg: CompensationConfig | None = None,
    set_id: int = 0,
    init_set: ScalingVectorSet | None = None,
    log: list | None = None,
) -> ScalingVectorSet:
    """Train one ScalingVectorSet at drift time t (frozen backbone).

    Every mini-batch gets a fresh drift instance whose seed mixes cfg.seed
    with the (epoch, batch) counter, so no instance repeats within a run and
    the whole run replays bit-identically from cfg.seed.
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    comp_cfg = comp_cfg or CompensationConfig()
    cmap = cmap or ConductanceMap()
    prepared = PreparedBackbone(backbone.weights, cmap)
    if init_set is not None:
        vec_set = init_set.copy(set_id=set_id, drift_time=float(t))
    else:
        vec_set = new_scaling_set(backbone.model, comp_cfg, float(t), set_id)
    params = {}
    for name, (d, b) in vec_set.vectors.items():
        params["d:" + name] = d
        params["b:" + name] = b
    opt = make_optimizer(cfg)
    act_bits = backbone.scheme.act_bits
    for epoch in range(1, cfg.epochs + 1):
        order_rng = make_rng(child_seed(cfg.seed, "order", epoch))
        for bi, idx in enumerate(_batches(len(dataset), cfg.batch_size, order_rng)):
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            drift_seed = child_seed(cfg.seed, "drift", epoch, bi)
            drifted = inject_drift(prepared, t, drift_model, seed=drift_seed)
            comp = ActiveCompensation(proj, vec_set)
            logits, cache = forward(
                backbone.model,
                drifted.values,
                backbone.biases,
                xb,
                comp=comp,
                act_bits=act_bits,
                cache="comp",
            )
            loss, dlogits = _loss_and_dlogits(logits, yb)
            gset, _ = backprop(
                backbone.model, drifted.values, backbone.biases, cache, dlogits, comp=comp
            )
            grads = {}
            for name, (gd, gb) in gset.vectors.items():
                grads["d:" + name] = gd
                grads["b:" + name] = gb
            opt.step(params, grads)
            if log is not None:
                log.append(
                    {
                        "epoch": epoch,
                        "batch": bi,
                        "t_seconds": float(t),
                        "loss": loss,
                        "grad_norm_b": gset.norm_b(),
                        "grad_norm_d": gset.norm_d(),
                    }
                )
    return vec_set.freeze()


# ---------------------------------------------------------------------------
# backbone pretraining (toy utility)
# ---------------------------------------------------------------------------

def init_backbone(model: ModelSpec, seed: int):
    """He-style initialization; conv layers carry no bias, the head does."""
    rng = make_rng(seed)
    weights, biases = {}, {}
    for layer in model.layers:
        if layer.kind == "conv2d":
            std = np.sqrt(2.0 / (layer.k * layer.k * layer.c_in))
            weights[layer.name] = rng.normal(0.0, std, size=(layer.c_out, layer.c_in, layer.k, layer.k))
        elif layer.kind == "linear":
            std = np.sqrt(1.0 / layer.c_in)
            weights[layer.name] = rng.normal(0.0, std, size=(layer.c_out, layer.c_in))
            biases[layer.name] = np.zeros(layer.c_out)
    return weights, biases


def _fake_quant_weights(model: ModelSpec, weights: dict, scheme: QuantScheme) -> dict:
    out = dict(weights)
    ckpt = quantize_backbone(model, weights, {}, scheme)
    out.update(ckpt.dequantized())
    return out


def pretrain_backbone(
    model: ModelSpec,
    dataset: LabeledDataset,
    epochs: int = 30,
    learning_rate: float = 2e-3,
    batch_size: int = 64,
    seed: int = 0,
    qat_epochs: int = 0,
    scheme: QuantScheme | None = None,
    log: list | None = None,
):
    """Full-precision training of the toy backbone, optional STE fine-tuning.

    Returns (weights, biases) in float64. Pass ``qat_epochs > 0`` with a
    scheme to append a straight-through fine-tuning phase in which the
    forward pass sees fake-quantized weights while updates land on the
    full-precision master copies.
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    weights, biases = init_backbone(model, child_seed(seed, "init"))
    params = {}
    for name, w in weights.items():
        params["w:" + name] = w
    for name, b in biases.items():
        params["bias:" + name] = b
    opt = Adam(learning_rate)
    total_epochs = epochs + qat_epochs
    for epoch in range(1, total_epochs + 1):
        qat = epoch > epochs
        order_rng = make_rng(child_seed(seed, "shuffle", epoch))
        for bi, idx in enumerate(_batches(len(dataset), batch_size, order_rng)):
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            fwd_weights = (
                _fake_quant_weights(model, weights, scheme) if qat and scheme else weights
            )
            logits, cache = forward(model, fwd_weights, biases, xb, cache="full")
            loss, dlogits = _loss_and_dlogits(logits, yb)
            _, wgrads = backprop(
                model, fwd_weights, biases, cache, dlogits, want_weight_grads=True
            )
            opt.step(params, wgrads)
            if log is not None:
                log.append({"epoch": epoch, "batch": bi, "loss": loss, "qat": qat})
    return weights, biases
