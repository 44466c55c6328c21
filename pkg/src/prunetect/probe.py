"""Detection signal: accuracy vectors of pruned model variants.

One measure() call ranks filters once, plans the |S| sample sets, selects
a class-balanced evaluation slice, and records the accuracy of each pruned
variant plus the wall-clock time of the whole measurement.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .nn import Model, accuracy
from .pruning import PruningConfig, PruningError, config_hash, plan_samples, prune, rank_filters


class MeasureError(ValueError):
    pass


@dataclass
class AccuracyVector:
    values: np.ndarray        # |S| accuracies, sample order
    elapsed_seconds: float
    config: PruningConfig
    model_id: str = ""


def select_eval_images(images, labels, num_images: int, seed: int):
    """First num_images of a seeded class-balanced shuffle.

    Per-class orders are seeded shuffles; classes are interleaved one
    image per round (ascending class id), so any prefix is balanced.
    """
    labels = np.asarray(labels)
    if num_images > labels.size:
        raise MeasureError(f"requested {num_images} images, only {labels.size} available")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5E1E])))
    queues = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        queues.append(idx[rng.permutation(idx.size)])
    order = []
    round_no = 0
    while len(order) < num_images:
        added = False
        for q in queues:
            if round_no < q.size:
                order.append(q[round_no])
                added = True
        if not added:
            break
        round_no += 1
    sel = np.asarray(order[:num_images])
    return images[sel], labels[sel]


def measure(model: Model, config: PruningConfig, eval_images, eval_labels,
            model_id: str = "") -> AccuracyVector:
    """Accuracy of each of the |S| pruned variants on the selected images.

    Deterministic apart from elapsed_seconds, which wraps ranking,
    planning, pruning, and evaluation (the per-model cost the execution
    constraint budgets).
    """
    t0 = time.perf_counter()
    try:
        ranking = rank_filters(model, config.rm)
        plan = plan_samples(ranking, config.p, config.num_samples, config.sm, config.seed)
    except PruningError as e:
        raise MeasureError(f"planning: {e}") from e
    images, labels = select_eval_images(eval_images, eval_labels,
                                        config.num_images, config.seed)
    values = np.empty(config.num_samples, dtype=np.float64)
    for s, sample in enumerate(plan.samples):
        try:
            pruned = prune(model, sample, config.pm, config.trim_k)
        except PruningError as e:
            raise MeasureError(f"sample {s}: {e}") from e
        values[s] = accuracy(pruned, images, labels)
    elapsed = time.perf_counter() - t0
    return AccuracyVector(values, elapsed, config, model_id)


# ---------------------------------------------------------------------------
# Signal persistence
# ---------------------------------------------------------------------------

def write_signals(path, vectors, echo_lines=()):
    """TSV of accuracy vectors; '#' comment lines carry the resolved config."""
    if not vectors:
        raise MeasureError("no signals to write")
    s = vectors[0].config.num_samples
    with open(path, "w") as fh:
        for line in echo_lines:
            fh.write(f"# {line}\n")
        cols = ["model_id", "config_hash"] + [f"a{k + 1}" for k in range(s)] + ["elapsed_seconds"]
        fh.write("\t".join(cols) + "\n")
        for v in vectors:
            if v.values.size != s:
                raise MeasureError("mixed |S| in one signal file")
            vals = "\t".join(repr(float(x)) for x in v.values)
            fh.write(f"{v.model_id}\t{config_hash(v.config)}\t{vals}\t{v.elapsed_seconds!r}\n")


def read_signals(path):
    """Rows of (model_id, config_hash, values-array, elapsed)."""
    rows = []
    with open(path) as fh:
        header = None
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split("\t")
                continue
            parts = line.split("\t")
            values = np.asarray([float(x) for x in parts[2:-1]])
            rows.append((parts[0], parts[1], values, float(parts[-1])))
    return rows
