"""Minimal dense-tensor CNN inference and reverse-mode gradients.

All tensors are float64 numpy arrays in row-major [N, C, H, W] layout.
Models are plain layer chains (no branching); inference is pure, training
steps mutate parameters in place via the caller's SGD loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

F64 = np.float64


class GraphError(ValueError):
    """Layer chain is inconsistent; carries the offending layer index."""

    def __init__(self, layer_index: int, message: str):
        self.layer_index = layer_index
        super().__init__(f"layer {layer_index}: {message}")


# ---------------------------------------------------------------------------
# Layer kinds
# ---------------------------------------------------------------------------

@dataclass
class Conv2D:
    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    weight: np.ndarray  # [out, in, kh, kw]
    bias: np.ndarray    # [out]

    kind = "Conv2D"

    def param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]


@dataclass
class BatchNorm:
    channels: int
    epsilon: float
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    kind = "BatchNorm"

    def param_items(self):
        return [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]


@dataclass
class ReLU:
    kind = "ReLU"

    def param_items(self):
        return []


@dataclass
class MaxPool:
    window: int
    stride: int

    kind = "MaxPool"

    def param_items(self):
        return []


@dataclass
class GlobalAvgPool:
    kind = "GlobalAvgPool"

    def param_items(self):
        return []


@dataclass
class Flatten:
    kind = "Flatten"

    def param_items(self):
        return []


@dataclass
class Dense:
    out_features: int
    in_features: int
    weight: np.ndarray  # [out, in]
    bias: np.ndarray    # [out]

    kind = "Dense"

    def param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]


LAYER_KINDS = (Conv2D, BatchNorm, ReLU, MaxPool, GlobalAvgPool, Flatten, Dense)

# Parameters that receive gradients (BatchNorm running stats are state, not
# trainable weights).
TRAINABLE = {
    "Conv2D": ("weight", "bias"),
    "BatchNorm": ("gamma", "beta"),
    "Dense": ("weight", "bias"),
}


@dataclass
class Model:
    """A layered CNN graph with weights.

    architecture_id is a pure function of the layer-kind/shape skeleton:
    either a registered family name pinned to one skeleton (see zoo) or a
    digest-derived id (see store.skeleton_id).
    """

    architecture_id: str
    input_shape: tuple  # (channels, height, width)
    num_classes: int
    layers: list
    metadata: dict = field(default_factory=dict)


def clone_model(model: Model) -> Model:
    """Deep copy: fresh parameter arrays, fresh metadata dict."""
    new_layers = []
    for layer in model.layers:
        kwargs = {}
        for name, arr in layer.param_items():
            kwargs[name] = arr.copy()
        new_layers.append(replace(layer, **kwargs) if kwargs else replace(layer))
    return Model(
        architecture_id=model.architecture_id,
        input_shape=tuple(model.input_shape),
        num_classes=model.num_classes,
        layers=new_layers,
        metadata=dict(model.metadata),
    )


def parameter_count(model: Model) -> int:
    return sum(arr.size for layer in model.layers for _, arr in layer.param_items())


# ---------------------------------------------------------------------------
# Shape inference and graph validation
# ---------------------------------------------------------------------------

def infer_shapes(model: Model):
    """Propagate the input shape through the chain.

    Returns one output shape per layer: ("chw", c, h, w) or ("flat", f).
    Raises GraphError naming the first inconsistent layer. Pooling windows
    must tile the input exactly (partial / overrunning windows rejected).
    """
    c, h, w = model.input_shape
    if c < 1 or h < 1 or w < 1:
        raise GraphError(-1, f"degenerate input shape {model.input_shape}")
    cur = ("chw", c, h, w)
    shapes = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2D):
            if cur[0] != "chw":
                raise GraphError(i, "Conv2D requires a [N,C,H,W] input")
            _, c, h, w = cur
            if c != layer.in_channels:
                raise GraphError(i, f"Conv2D expects {layer.in_channels} input channels, got {c}")
            hp, wp = h + 2 * layer.padding, w + 2 * layer.padding
            if layer.kernel_h > hp or layer.kernel_w > wp:
                raise GraphError(i, f"kernel {layer.kernel_h}x{layer.kernel_w} larger than padded input {hp}x{wp}")
            oh = (hp - layer.kernel_h) // layer.stride + 1
            ow = (wp - layer.kernel_w) // layer.stride + 1
            cur = ("chw", layer.out_channels, oh, ow)
        elif isinstance(layer, BatchNorm):
            if cur[0] != "chw":
                raise GraphError(i, "BatchNorm requires a [N,C,H,W] input")
            if cur[1] != layer.channels:
                raise GraphError(i, f"BatchNorm expects {layer.channels} channels, got {cur[1]}")
        elif isinstance(layer, ReLU):
            pass
        elif isinstance(layer, MaxPool):
            if cur[0] != "chw":
                raise GraphError(i, "MaxPool requires a [N,C,H,W] input")
            _, c, h, w = cur
            if layer.window > h or layer.window > w:
                raise GraphError(i, f"pool window {layer.window} exceeds input {h}x{w}")
            if (h - layer.window) % layer.stride or (w - layer.window) % layer.stride:
                raise GraphError(i, "pool windows must tile the input exactly (no partial windows)")
            oh = (h - layer.window) // layer.stride + 1
            ow = (w - layer.window) // layer.stride + 1
            cur = ("chw", c, oh, ow)
        elif isinstance(layer, GlobalAvgPool):
            if cur[0] != "chw":
                raise GraphError(i, "GlobalAvgPool requires a [N,C,H,W] input")
            cur = ("flat", cur[1])
        elif isinstance(layer, Flatten):
            if cur[0] != "chw":
                raise GraphError(i, "Flatten requires a [N,C,H,W] input")
            cur = ("flat", cur[1] * cur[2] * cur[3])
        elif isinstance(layer, Dense):
            if cur[0] != "flat":
                raise GraphError(i, "Dense requires a flat input (insert Flatten or GlobalAvgPool)")
            if cur[1] != layer.in_features:
                raise GraphError(i, f"Dense expects {layer.in_features} input features, got {cur[1]}")
            cur = ("flat", layer.out_features)
        else:
            raise GraphError(i, f"unknown layer kind {type(layer).__name__}")
        shapes.append(cur)
    return shapes


def validate_model(model: Model):
    """Full graph validation: shape chain, parameter shapes, BN positivity."""
    if not model.layers:
        raise GraphError(-1, "model has no layers")
    for i, layer in enumerate(model.layers):
        for name, arr in layer.param_items():
            if arr.dtype != F64:
                raise GraphError(i, f"parameter {name} must be float64, got {arr.dtype}")
            if not np.all(np.isfinite(arr)):
                raise GraphError(i, f"parameter {name} contains NaN/Inf")
        if isinstance(layer, Conv2D):
            want = (layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w)
            if layer.weight.shape != want:
                raise GraphError(i, f"Conv2D weight shape {layer.weight.shape} != {want}")
            if layer.bias.shape != (layer.out_channels,):
                raise GraphError(i, f"Conv2D bias shape {layer.bias.shape} != ({layer.out_channels},)")
        elif isinstance(layer, BatchNorm):
            for name, arr in layer.param_items():
                if arr.shape != (layer.channels,):
                    raise GraphError(i, f"BatchNorm {name} shape {arr.shape} != ({layer.channels},)")
            if np.any(layer.running_var <= 0):
                raise GraphError(i, "BatchNorm running_var must be strictly positive")
        elif isinstance(layer, Dense):
            if layer.weight.shape != (layer.out_features, layer.in_features):
                raise GraphError(i, f"Dense weight shape {layer.weight.shape} != "
                                    f"({layer.out_features}, {layer.in_features})")
            if layer.bias.shape != (layer.out_features,):
                raise GraphError(i, f"Dense bias shape {layer.bias.shape} != ({layer.out_features},)")
    last = model.layers[-1]
    if not isinstance(last, Dense) or last.out_features != model.num_classes:
        raise GraphError(len(model.layers) - 1,
                         f"last layer must be Dense with out_features == num_classes ({model.num_classes})")
    infer_shapes(model)


# ---------------------------------------------------------------------------
# Forward primitives
# ---------------------------------------------------------------------------

def _pad2d(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp, kh, kw, stride):
    """[N,C,Hp,Wp] -> columns [N, OH*OW, C*kh*kw] plus (OH, OW)."""
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]
    n, c, oh, ow = v.shape[:4]
    cols = np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, c * kh * kw)
    return cols, oh, ow


def _col2im(dcols, n, c, hp, wp, kh, kw, stride, oh, ow):
    """Scatter-add column gradients back to the padded input."""
    dxp = np.zeros((n, c, hp, wp), dtype=F64)
    d = dcols.reshape(n, oh, ow, c, kh, kw)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += \
                d[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return dxp


def _conv_forward(layer, x, cache=None):
    xp = _pad2d(x, layer.padding)
    cols, oh, ow = _im2col(xp, layer.kernel_h, layer.kernel_w, layer.stride)
    wmat = layer.weight.reshape(layer.out_channels, -1)
    y = cols @ wmat.T + layer.bias
    y = y.reshape(x.shape[0], oh, ow, layer.out_channels).transpose(0, 3, 1, 2)
    if cache is not None:
        cache.update(cols=cols, oh=oh, ow=ow, xp_shape=xp.shape)
    return y


def _conv_backward(layer, cache, dy):
    n = dy.shape[0]
    oh, ow = cache["oh"], cache["ow"]
    cols = cache["cols"]
    dym = dy.transpose(0, 2, 3, 1).reshape(n, oh * ow, layer.out_channels)
    dw = (dym.reshape(-1, layer.out_channels).T @ cols.reshape(-1, cols.shape[2]))
    dw = dw.reshape(layer.weight.shape)
    db = dy.sum(axis=(0, 2, 3))
    wmat = layer.weight.reshape(layer.out_channels, -1)
    dcols = dym @ wmat
    _, c, hp, wp = cache["xp_shape"]
    dxp = _col2im(dcols, n, c, hp, wp, layer.kernel_h, layer.kernel_w, layer.stride, oh, ow)
    p = layer.padding
    dx = dxp[:, :, p:hp - p, p:wp - p] if p else dxp
    return {"weight": dw, "bias": db}, dx


def _bn_forward(layer, x, training, cache=None):
    if training:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))  # population variance
    else:
        mu, var = layer.running_mean, layer.running_var
    inv_std = 1.0 / np.sqrt(var + layer.epsilon)
    xhat = (x - mu[:, None, None]) * inv_std[:, None, None]
    y = layer.gamma[:, None, None] * xhat + layer.beta[:, None, None]
    if cache is not None:
        cache.update(xhat=xhat, inv_std=inv_std, batch_mean=mu, batch_var=var)
    return y


def _bn_backward(layer, cache, dy):
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    n, _, h, w = dy.shape
    m = n * h * w
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * layer.gamma[:, None, None]
    s1 = dxhat.sum(axis=(0, 2, 3))
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
    dx = (inv_std[:, None, None] / m) * (m * dxhat - s1[:, None, None] - xhat * s2[:, None, None])
    return {"gamma": dgamma, "beta": dbeta}, dx


def _maxpool_forward(layer, x, cache=None):
    k, s = layer.window, layer.stride
    v = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n, c, oh, ow = v.shape[:4]
    flat = v.reshape(n, c, oh, ow, k * k)
    idx = flat.argmax(axis=-1)  # first max wins: deterministic
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if cache is not None:
        cache.update(idx=idx, in_shape=x.shape, oh=oh, ow=ow)
    return y


def _maxpool_backward(layer, cache, dy):
    k, s = layer.window, layer.stride
    idx, (n, c, h, w) = cache["idx"], cache["in_shape"]
    oh, ow = cache["oh"], cache["ow"]
    dx = np.zeros((n, c, h, w), dtype=F64)
    for ki in range(k):
        for kj in range(k):
            sel = (idx == ki * k + kj)
            dx[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s] += dy * sel
    return {}, dx


def _layer_forward(layer, x, training, cache=None):
    if isinstance(layer, Conv2D):
        return _conv_forward(layer, x, cache)
    if isinstance(layer, BatchNorm):
        return _bn_forward(layer, x, training, cache)
    if isinstance(layer, ReLU):
        if cache is not None:
            cache["mask"] = x > 0
        return np.maximum(x, 0.0)
    if isinstance(layer, MaxPool):
        return _maxpool_forward(layer, x, cache)
    if isinstance(layer, GlobalAvgPool):
        if cache is not None:
            cache["in_shape"] = x.shape
        return x.mean(axis=(2, 3))
    if isinstance(layer, Flatten):
        if cache is not None:
            cache["in_shape"] = x.shape
        return x.reshape(x.shape[0], -1)
    if isinstance(layer, Dense):
        if cache is not None:
            cache["x"] = x
        return x @ layer.weight.T + layer.bias
    raise TypeError(f"unknown layer {type(layer).__name__}")


def _layer_backward(layer, cache, dy):
    if isinstance(layer, Conv2D):
        return _conv_backward(layer, cache, dy)
    if isinstance(layer, BatchNorm):
        return _bn_backward(layer, cache, dy)
    if isinstance(layer, ReLU):
        return {}, dy * cache["mask"]
    if isinstance(layer, MaxPool):
        return _maxpool_backward(layer, cache, dy)
    if isinstance(layer, GlobalAvgPool):
        n, c, h, w = cache["in_shape"]
        return {}, np.broadcast_to(dy[:, :, None, None], (n, c, h, w)) / (h * w)
    if isinstance(layer, Flatten):
        return {}, dy.reshape(cache["in_shape"])
    if isinstance(layer, Dense):
        x = cache["x"]
        return {"weight": dy.T @ x, "bias": dy.sum(axis=0)}, dy @ layer.weight
    raise TypeError(f"unknown layer {type(layer).__name__}")


def _check_batch(model, batch):
    if batch.ndim != 4:
        raise ValueError(f"batch must be [N,C,H,W], got shape {batch.shape}")
    if tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise ValueError(f"batch shape {tuple(batch.shape[1:])} does not match "
                         f"model input shape {tuple(model.input_shape)}")


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def forward(model: Model, batch) -> np.ndarray:
    """Inference-mode logits [N, num_classes]; BatchNorm uses running stats."""
    batch = np.asarray(batch, dtype=F64)
    _check_batch(model, batch)
    infer_shapes(model)
    x = batch
    for layer in model.layers:
        x = _layer_forward(layer, x, training=False)
    return x


def _softmax_ce(logits, labels):
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float((lse[:, 0] - z[np.arange(n), labels]).mean())
    p = np.exp(z - lse)
    p[np.arange(n), labels] -= 1.0
    return loss, p / n


def _check_labels(model, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty label set")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError(f"label index out of range for {model.num_classes} classes")
    return labels


def training_loss(model: Model, batch, labels) -> float:
    """Mean softmax cross-entropy in training mode (batch statistics)."""
    batch = np.asarray(batch, dtype=F64)
    _check_batch(model, batch)
    labels = _check_labels(model, labels)
    x = batch
    for layer in model.layers:
        x = _layer_forward(layer, x, training=True)
    loss, _ = _softmax_ce(x, labels)
    return loss


def backward(model: Model, batch, labels, *, update_running_stats=False):
    """Training-mode loss and gradients.

    Returns (loss, grads) where grads is a per-layer list of name->array
    dicts aligned with model.layers (empty dict for parameter-free layers).
    BatchNorm normalizes with batch statistics; when update_running_stats
    is set, running stats move toward the batch stats with momentum 0.1.
    """
    batch = np.asarray(batch, dtype=F64)
    _check_batch(model, batch)
    labels = _check_labels(model, labels)
    caches = []
    x = batch
    for layer in model.layers:
        cache = {}
        x = _layer_forward(layer, x, training=True, cache=cache)
        caches.append(cache)
    loss, dy = _softmax_ce(x, labels)
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        g, dy = _layer_backward(model.layers[i], caches[i], dy)
        grads[i] = g
    if update_running_stats:
        momentum = 0.1
        for layer, cache in zip(model.layers, caches):
            if isinstance(layer, BatchNorm):
                layer.running_mean *= 1.0 - momentum
                layer.running_mean += momentum * cache["batch_mean"]
                layer.running_var *= 1.0 - momentum
                layer.running_var += momentum * cache["batch_var"]
    return loss, grads


def sgd_step(model: Model, grads, lr: float):
    """In-place SGD update over the trainable parameters."""
    for layer, g in zip(model.layers, grads):
        trainable = TRAINABLE.get(layer.kind, ())
        for name, arr in layer.param_items():
            if name in trainable:
                arr -= lr * g[name]


def accuracy(model: Model, images, labels) -> float:
    """Top-1 accuracy; argmax ties break toward the lowest class index."""
    images = np.asarray(images, dtype=F64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ValueError("empty evaluation set")
    if images.shape[0] != labels.shape[0]:
        raise ValueError("images/labels length mismatch")
    logits = forward(model, images)
    pred = logits.argmax(axis=1)
    return float((pred == labels).mean())
