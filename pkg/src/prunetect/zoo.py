"""Registered toy CNN family used by the forge.

Each registered name pins one exact layer-kind/shape skeleton, so the
architecture id stays a pure function of the skeleton. Weights are seeded
He-normal; BatchNorm starts at identity with unit running variance.
"""

from __future__ import annotations

import numpy as np

from .nn import (
    BatchNorm,
    Conv2D,
    Dense,
    GlobalAvgPool,
    MaxPool,
    Model,
    ReLU,
    validate_model,
)

INPUT_SHAPE = (3, 24, 24)
NUM_CLASSES = 5


def _conv(rng, out_c, in_c, k=3, stride=1, pad=1):
    fan_in = in_c * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k))
    return Conv2D(out_c, in_c, k, k, stride, pad, weight=w, bias=np.zeros(out_c))


def _bn(c):
    return BatchNorm(c, 1e-5, gamma=np.ones(c), beta=np.zeros(c),
                     running_mean=np.zeros(c), running_var=np.ones(c))


def _dense(rng, out_f, in_f):
    w = rng.normal(0.0, np.sqrt(2.0 / in_f), size=(out_f, in_f))
    return Dense(out_f, in_f, weight=w, bias=np.zeros(out_f))


def _toycnn_a(rng):
    # 24x24 -> pool -> 12x12 -> pool -> 6x6 -> GAP
    return [
        _conv(rng, 16, 3), _bn(16), ReLU(), MaxPool(2, 2),
        _conv(rng, 32, 16), _bn(32), ReLU(), MaxPool(2, 2),
        GlobalAvgPool(), _dense(rng, NUM_CLASSES, 32),
    ]


def _toycnn_b(rng):
    # wider sibling of toycnn-a; the GlobalAvgPool bottleneck keeps trigger
    # features competing with class features for channels
    return [
        _conv(rng, 24, 3), _bn(24), ReLU(), MaxPool(2, 2),
        _conv(rng, 48, 24), _bn(48), ReLU(), MaxPool(2, 2),
        GlobalAvgPool(), _dense(rng, NUM_CLASSES, 48),
    ]


_REGISTRY = {
    "toycnn-a": _toycnn_a,
    "toycnn-b": _toycnn_b,
}


def registered_ids():
    return sorted(_REGISTRY)


def build(arch_id: str, seed: int = 0) -> Model:
    """Fresh seeded-random model of a registered architecture."""
    if arch_id not in _REGISTRY:
        raise KeyError(f"unknown architecture {arch_id!r}; registered: {registered_ids()}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x261F])))
    model = Model(
        architecture_id=arch_id,
        input_shape=INPUT_SHAPE,
        num_classes=NUM_CLASSES,
        layers=_REGISTRY[arch_id](rng),
        metadata={"seed": str(seed)},
    )
    validate_model(model)
    return model
