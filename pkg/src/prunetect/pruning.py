"""Filter ranking, sample planning, and the three pruning methods.

A pruning configuration is the six-tuple {PM, SM, RM, p, |S|, |D|} plus
the trim multiplier k and an RNG seed (used only by random sampling).
Filters are ranked per Conv2D layer by a norm of their own weight
coefficients; sample sets are blocks (targeted), strides (uniform) or
seeded draws (random) over the ranked order, lowest norm first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from hashlib import sha256

import numpy as np

from .nn import BatchNorm, Conv2D, Dense, Flatten, GlobalAvgPool, MaxPool, Model, ReLU, \
    clone_model, infer_shapes, validate_model
from .store import skeleton_id


class PruneMethod(str, Enum):
    REMOVE = "remove"
    RESET = "reset"
    TRIM = "trim"


class SampleMethod(str, Enum):
    RANDOM = "random"
    UNIFORM = "uniform"
    TARGETED = "targeted"


class RankMethod(str, Enum):
    L1 = "l1"
    L2 = "l2"
    LINF = "linf"
    STDEV = "stdev"


class PruningError(ValueError):
    pass


class NoConvLayersError(PruningError):
    pass


class OversampledLayerError(PruningError):
    pass


class RewiringError(PruningError):
    """Remove cannot resolve the consumer wiring for a layer."""

    def __init__(self, layer_index, message):
        self.layer_index = layer_index
        super().__init__(f"layer {layer_index}: {message}")


@dataclass(frozen=True)
class PruningConfig:
    pm: PruneMethod
    sm: SampleMethod
    rm: RankMethod
    p: float
    num_samples: int
    num_images: int
    trim_k: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pm", PruneMethod(self.pm))
        object.__setattr__(self, "sm", SampleMethod(self.sm))
        object.__setattr__(self, "rm", RankMethod(self.rm))
        if not 0.0 < self.p < 1.0:
            raise PruningError(f"p must lie in (0,1), got {self.p}")
        if not 0.0 < self.trim_k <= 1.0:
            raise PruningError(f"trim_k must lie in (0,1], got {self.trim_k}")
        if self.num_samples < 1:
            raise PruningError("num_samples must be >= 1")
        if self.num_images < 1:
            raise PruningError("num_images must be >= 1")

    def sort_key(self):
        return (self.pm.value, self.sm.value, self.rm.value, self.p,
                self.num_samples, self.num_images, self.trim_k, self.seed)

    def canonical(self) -> str:
        return (f"pm={self.pm.value},sm={self.sm.value},rm={self.rm.value},"
                f"p={self.p!r},s={self.num_samples},d={self.num_images},"
                f"trim_k={self.trim_k!r},seed={self.seed}")


def config_hash(config: PruningConfig) -> str:
    return sha256(config.canonical().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------

@dataclass
class FilterRanking:
    """Per Conv2D layer: filter indices sorted ascending by norm."""

    layer_indices: list      # positions of the Conv2D layers in model.layers
    order: list              # per layer: np.ndarray of filter indices, ascending norm
    sorted_norms: list       # per layer: norms aligned with `order`
    filter_counts: list      # per layer: |F_j|


def conv_layer_indices(model: Model):
    return [i for i, layer in enumerate(model.layers) if isinstance(layer, Conv2D)]


def filter_norm(weights: np.ndarray, rm: RankMethod) -> np.ndarray:
    """Per-filter norm over each filter's own coefficients (bias excluded)."""
    flat = weights.reshape(weights.shape[0], -1)
    rm = RankMethod(rm)
    if rm is RankMethod.L1:
        return np.abs(flat).sum(axis=1)
    if rm is RankMethod.L2:
        return np.sqrt((flat ** 2).sum(axis=1))
    if rm is RankMethod.LINF:
        return np.abs(flat).max(axis=1)
    return flat.std(axis=1)  # population stdev


def rank_filters(model: Model, rm: RankMethod) -> FilterRanking:
    idxs = conv_layer_indices(model)
    if not idxs:
        raise NoConvLayersError("model has no Conv2D layers")
    order, norms, counts = [], [], []
    for i in idxs:
        n = filter_norm(model.layers[i].weight, rm)
        o = np.argsort(n, kind="stable")  # ties -> ascending filter index
        order.append(o)
        norms.append(n[o])
        counts.append(len(n))
    return FilterRanking(idxs, order, norms, counts)


# ---------------------------------------------------------------------------
# Sample planning
# ---------------------------------------------------------------------------

@dataclass
class SamplePlan:
    """For each of the |S| samples, the per-layer filter index sets to prune."""

    samples: list  # per sample: dict layer_index -> sorted np.ndarray of filter indices
    ranked_positions: list  # per sample: dict layer_index -> positions into the ranked order


def sample_size(p: float, filter_count: int) -> int:
    """Filters pruned per layer per sample: floor(p*|F|), at least one."""
    return max(1, math.floor(p * filter_count))


def plan_samples(ranking: FilterRanking, p: float, num_samples: int,
                 sm: SampleMethod, seed: int = 0) -> SamplePlan:
    sm = SampleMethod(sm)
    if not 0.0 < p < 1.0:
        raise PruningError(f"p must lie in (0,1), got {p}")
    if num_samples < 1:
        raise PruningError("num_samples must be >= 1")
    if not ranking.layer_indices:
        raise NoConvLayersError("ranking covers no Conv2D layers")
    if sm in (SampleMethod.TARGETED, SampleMethod.UNIFORM):
        for li, count in zip(ranking.layer_indices, ranking.filter_counts):
            if num_samples * sample_size(p, count) > count:
                raise OversampledLayerError(
                    f"layer {li}: {num_samples} samples of {sample_size(p, count)} "
                    f"filters exceed |F|={count}")
    samples, positions = [], []
    for s in range(num_samples):
        per_layer, per_layer_pos = {}, {}
        for j, li in enumerate(ranking.layer_indices):
            count = ranking.filter_counts[j]
            m = sample_size(p, count)
            if sm is SampleMethod.TARGETED:
                pos = np.arange(s * m, (s + 1) * m)
            elif sm is SampleMethod.UNIFORM:
                pos = np.arange(s, s + m * num_samples, num_samples)[:m]
            else:
                rng = np.random.Generator(np.random.PCG64(
                    np.random.SeedSequence([seed, li, s])))
                pos = rng.choice(count, size=m, replace=False)
            per_layer_pos[li] = np.sort(pos)
            per_layer[li] = np.sort(ranking.order[j][pos])
        samples.append(per_layer)
        positions.append(per_layer_pos)
    return SamplePlan(samples, positions)


# ---------------------------------------------------------------------------
# Pruning methods
# ---------------------------------------------------------------------------

def _check_sample(model, sample):
    for li, idxs in sample.items():
        layer = model.layers[li]
        if not isinstance(layer, Conv2D):
            raise PruningError(f"layer {li} is not Conv2D")
        idxs = np.asarray(idxs)
        if idxs.size == 0:
            raise PruningError(f"layer {li}: empty filter set")
        if idxs.min() < 0 or idxs.max() >= layer.out_channels:
            raise PruningError(f"layer {li}: filter index out of range")


def _reset_filters(model, sample):
    for li, idxs in sample.items():
        layer = model.layers[li]
        layer.weight[idxs] = 0.0
        layer.bias[idxs] = 0.0


def _trim_filters(model, sample, k):
    for li, idxs in sample.items():
        layer = model.layers[li]
        for f in np.asarray(idxs):
            coeffs = layer.weight[f]
            mu = coeffs.mean()
            sd = coeffs.std()  # population stdev
            layer.weight[f] = np.clip(coeffs, mu - k * sd, mu + k * sd)


def _spatial_at(model, layer_index):
    """(h, w) of the tensor entering model.layers[layer_index]."""
    shapes = infer_shapes(model)
    if layer_index == 0:
        return model.input_shape[1], model.input_shape[2]
    prev = shapes[layer_index - 1]
    if prev[0] != "chw":
        raise RewiringError(layer_index, "expected a spatial input at this layer")
    return prev[2], prev[3]


def _remove_filters(model, sample):
    """Delete output channels and rewire each downstream consumer.

    Defined for linear chains Conv -> [BatchNorm] -> {ReLU, MaxPool}* ->
    (Conv | GlobalAvgPool -> ... -> Dense | Flatten -> ... -> Dense).
    """
    # spatial dims must be read before shapes start changing
    flatten_spatial = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Flatten):
            h, w = _spatial_at(model, i)
            flatten_spatial[i] = h * w
    for li in sorted(sample):
        idxs = np.asarray(sample[li])
        conv = model.layers[li]
        if idxs.size >= conv.out_channels:
            raise RewiringError(li, "cannot remove every filter of a layer")
        conv.weight = np.delete(conv.weight, idxs, axis=0)
        conv.bias = np.delete(conv.bias, idxs, axis=0)
        conv.out_channels -= idxs.size
        j = li + 1
        if j < len(model.layers) and isinstance(model.layers[j], BatchNorm):
            bn = model.layers[j]
            bn.gamma = np.delete(bn.gamma, idxs)
            bn.beta = np.delete(bn.beta, idxs)
            bn.running_mean = np.delete(bn.running_mean, idxs)
            bn.running_var = np.delete(bn.running_var, idxs)
            bn.channels -= idxs.size
            j += 1
        # walk to the next weight-bearing consumer
        mult = 1  # flattened positions per channel
        while j < len(model.layers):
            nxt = model.layers[j]
            if isinstance(nxt, Conv2D):
                nxt.weight = np.delete(nxt.weight, idxs, axis=1)
                nxt.in_channels -= idxs.size
                break
            if isinstance(nxt, Dense):
                cols = (idxs[:, None] * mult + np.arange(mult)).ravel()
                nxt.weight = np.delete(nxt.weight, cols, axis=1)
                nxt.in_features -= cols.size
                break
            if isinstance(nxt, BatchNorm):
                raise RewiringError(li, f"BatchNorm at layer {j} is not adjacent to its Conv2D; "
                                        "consumer wiring unresolved")
            if isinstance(nxt, Flatten):
                mult = flatten_spatial[j]
            elif isinstance(nxt, GlobalAvgPool):
                mult = 1
            elif not isinstance(nxt, (ReLU, MaxPool)):
                raise RewiringError(li, f"cannot rewire through layer {j} "
                                        f"({type(nxt).__name__})")
            j += 1
        else:
            raise RewiringError(li, "no downstream consumer found")


def prune(model: Model, sample: dict, pm: PruneMethod, trim_k: float = 0.5) -> Model:
    """Pruned copy of the model; the input model is never mutated.

    `sample` maps Conv2D layer index -> filter indices, one entry of a
    SamplePlan. Remove rewrites downstream shapes and re-derives the
    architecture id; Reset and Trim leave the skeleton untouched.
    """
    pm = PruneMethod(pm)
    _check_sample(model, sample)
    out = clone_model(model)
    if pm is PruneMethod.RESET:
        _reset_filters(out, sample)
    elif pm is PruneMethod.TRIM:
        if not 0.0 < trim_k <= 1.0:
            raise PruningError(f"trim_k must lie in (0,1], got {trim_k}")
        _trim_filters(out, sample, trim_k)
    else:
        _remove_filters(out, sample)
        out.architecture_id = skeleton_id(out)
        out.metadata["pruned_from"] = model.architecture_id
    validate_model(out)
    return out


# ---------------------------------------------------------------------------
# Search-space derivations
# ---------------------------------------------------------------------------

def derive_p_min_layer(model: Model) -> float:
    """p such that every layer loses at least one filter: 1/min|F_j|."""
    idxs = conv_layer_indices(model)
    if not idxs:
        raise NoConvLayersError("model has no Conv2D layers")
    return 1.0 / min(model.layers[i].out_channels for i in idxs)


def derive_p_coverage(k_multiplier: float, num_samples: int) -> float:
    """p = k/|S| so each filter is pruned about k times across the samples."""
    if num_samples < 1:
        raise PruningError("num_samples must be >= 1")
    if not 1 <= k_multiplier < num_samples:
        raise PruningError(f"k must satisfy 1 <= k < num_samples, got {k_multiplier}")
    p = k_multiplier / num_samples
    if not 0.0 < p < 1.0:
        raise PruningError(f"derived p={p} outside (0,1)")
    return p


def search_space_size(model: Model):
    """(all non-empty filter subsets per layer, ranked-list reduction)."""
    idxs = conv_layer_indices(model)
    if not idxs:
        raise NoConvLayersError("model has no Conv2D layers")
    full, reduced = 1, 1
    for i in idxs:
        f = model.layers[i].out_channels
        full *= 2 ** f - 1
        reduced *= f
    return full, reduced
