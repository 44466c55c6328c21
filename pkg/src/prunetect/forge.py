"""Corpus forge: train labeled sets of clean and poisoned toy models.

Each model gets its own seeded dataset, init, and (if poisoned) trigger;
the whole corpus is a pure function of the forge arguments. Models that
miss the accuracy/trigger thresholds are retrained with fresh seeds up to
MAX_RETRIES times and recorded as rejected if they still fail.

Corpus layout:

    <dir>/MANIFEST.tsv
    <dir>/models/<id>.prnt
    <dir>/eval/<id>/images.f64     raw float64 [N,3,H,W] blob
    <dir>/eval/<id>/index.tsv      count/channels/height/width + per-image labels
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn, store, synth, zoo

POISON_RATE = 0.25       # fraction of each non-target class triggered during training
CLEAN_ACC_MIN = 0.90
TRIGGER_ACC_MIN = 0.90
MAX_RETRIES = 3

MANIFEST_COLUMNS = ("id", "architecture_id", "label", "seed", "clean_acc",
                    "trigger_acc", "status", "train_trigger_frac")


@dataclass(frozen=True)
class ForgeParams:
    arch_ids: tuple
    models_per_arch: int
    poison_fraction: float
    epochs: int
    lr: float
    seed: int
    num_classes: int = zoo.NUM_CLASSES
    per_class_count: int = 60
    eval_per_class: int = 10
    height: int = 24
    width: int = 24
    batch_size: int = 32
    trigger_target_rule: str = "seeded"  # or "fixed:<class>"

    def __post_init__(self):
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ValueError("poison_fraction must lie in [0,1]")
        for arch in self.arch_ids:
            if arch not in zoo.registered_ids():
                raise ValueError(f"unknown architecture {arch!r}")


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def train_model(model, images, labels, *, epochs, lr, batch_size, seed):
    """Plain SGD with per-epoch reshuffling; mutates the model in place."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x7121])))
    n = images.shape[0]
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = perm[start:start + batch_size]
            if sel.size < 2:
                continue  # batch statistics need >= 2 samples
            loss, grads = nn.backward(model, images[sel], labels[sel],
                                      update_running_stats=True)
            nn.sgd_step(model, grads, lr)
    return model


def trigger_success_rate(model, images, labels, trigger) -> float:
    """Fraction of triggered non-target-class images predicted as the target."""
    keep = np.flatnonzero(labels != trigger.target_class)
    if keep.size == 0:
        raise ValueError("no non-target images to evaluate the trigger on")
    triggered = np.stack([synth.inject_trigger(images[i], trigger) for i in keep])
    logits = nn.forward(model, triggered)
    return float((logits.argmax(axis=1) == trigger.target_class).mean())


def _target_class(rule, rng, num_classes):
    if rule == "seeded":
        return int(rng.integers(num_classes))
    if rule.startswith("fixed:"):
        c = int(rule.split(":", 1)[1])
        if not 0 <= c < num_classes:
            raise ValueError(f"fixed target class {c} out of range")
        return c
    raise ValueError(f"unknown trigger_target_rule {rule!r}")


def _forge_one(task):
    """Train one model end to end; returns (manifest_row, model, eval_ds)."""
    params, arch_idx, model_idx, poisoned, model_id = task
    arch = params.arch_ids[arch_idx]
    for retry in range(MAX_RETRIES + 1):
        seed = _derive_seed(params.seed, 1, arch_idx, model_idx, retry)
        ds = synth.gen_dataset(params.num_classes, params.per_class_count,
                               params.height, params.width,
                               _derive_seed(seed, 2))
        eval_ds = synth.gen_dataset(params.num_classes, params.eval_per_class,
                                    params.height, params.width,
                                    _derive_seed(seed, 3))
        model = zoo.build(arch, seed=_derive_seed(seed, 4))
        trigger = None
        trigger_frac = 0.0
        if poisoned:
            trig_rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([seed, 5])))
            target = _target_class(params.trigger_target_rule, trig_rng, params.num_classes)
            trigger = synth.sample_trigger(trig_rng, params.num_classes,
                                           params.height, params.width, target)
            images, labels, trigger_frac = synth.poison_dataset(
                ds, trigger, POISON_RATE, _derive_seed(seed, 6))
        else:
            images, labels = ds.images, ds.labels
        train_model(model, images, labels, epochs=params.epochs, lr=params.lr,
                    batch_size=params.batch_size, seed=_derive_seed(seed, 7))
        clean_acc = nn.accuracy(model, eval_ds.images, eval_ds.labels)
        trig_acc = None
        ok = clean_acc >= CLEAN_ACC_MIN
        if poisoned:
            trig_acc = trigger_success_rate(model, eval_ds.images, eval_ds.labels, trigger)
            ok = ok and trig_acc >= TRIGGER_ACC_MIN
        if ok:
            break
    status = "ok" if ok else "rejected"
    model.metadata = {
        "seed": str(seed),
        "epochs": str(params.epochs),
        "lr": repr(params.lr),
        "forge_seed": str(params.seed),
    }
    row = {
        "id": model_id,
        "architecture_id": arch,
        "label": 1 if poisoned else 0,
        "seed": seed,
        "clean_acc": clean_acc,
        "trigger_acc": trig_acc,
        "status": status,
        "train_trigger_frac": trigger_frac,
    }
    return row, model, eval_ds


def _write_eval(eval_dir: Path, ds: synth.SyntheticDataset):
    eval_dir.mkdir(parents=True, exist_ok=True)
    (eval_dir / "images.f64").write_bytes(
        np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
    n, c, h, w = ds.images.shape
    with open(eval_dir / "index.tsv", "w") as fh:
        fh.write(f"count\t{n}\nchannels\t{c}\nheight\t{h}\nwidth\t{w}\n")
        for i, lab in enumerate(ds.labels):
            fh.write(f"image\t{i}\t{int(lab)}\n")


def _read_eval(eval_dir: Path):
    meta = {}
    labels = []
    with open(Path(eval_dir) / "index.tsv") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if parts[0] == "image":
                labels.append(int(parts[2]))
            else:
                meta[parts[0]] = int(parts[1])
    shape = (meta["count"], meta["channels"], meta["height"], meta["width"])
    raw = (Path(eval_dir) / "images.f64").read_bytes()
    images = np.frombuffer(raw, dtype="<f8").copy().reshape(shape)
    return images, np.asarray(labels, dtype=np.int64)


def _manifest_value(key, value):
    if value is None:
        return "na"
    if key in ("clean_acc", "trigger_acc", "train_trigger_frac"):
        return repr(float(value))
    return str(value)


def write_manifest(path, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(_manifest_value(c, row[c]) for c in MANIFEST_COLUMNS) + "\n")


def forge_corpus(out_dir, arch_ids, models_per_arch, poison_fraction, *,
                 epochs=12, lr=0.1, seed=0, trigger_target_rule="seeded",
                 jobs=1, **overrides) -> list:
    """Forge the corpus into out_dir; returns the manifest rows.

    Workers own their model and RNG streams, so results are identical for
    any job count.
    """
    params = ForgeParams(tuple(arch_ids), models_per_arch, poison_fraction,
                         epochs, lr, seed, trigger_target_rule=trigger_target_rule,
                         **overrides)
    out_dir = Path(out_dir)
    (out_dir / "models").mkdir(parents=True, exist_ok=True)
    n_poison = int(round(models_per_arch * poison_fraction))
    tasks = []
    for a, _arch in enumerate(params.arch_ids):
        for m in range(models_per_arch):
            model_id = f"m{a * models_per_arch + m:04d}"
            tasks.append((params, a, m, m < n_poison, model_id))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_forge_one, tasks))
    else:
        results = [_forge_one(t) for t in tasks]
    rows = []
    for row, model, eval_ds in results:
        rows.append(row)
        if row["status"] == "ok":
            store.save(model, out_dir / "models" / f"{row['id']}.prnt")
            _write_eval(out_dir / "eval" / row["id"], eval_ds)
    rows.sort(key=lambda r: r["id"])
    write_manifest(out_dir / "MANIFEST.tsv", rows)
    return rows


# ---------------------------------------------------------------------------
# Corpus access
# ---------------------------------------------------------------------------

@dataclass
class CorpusEntry:
    model_id: str
    architecture_id: str
    label: int
    seed: int
    clean_acc: float
    trigger_acc: float | None
    status: str
    model_path: Path
    eval_dir: Path

    def load_model(self):
        return store.load(self.model_path)

    def load_eval(self):
        return _read_eval(self.eval_dir)


def load_corpus(corpus_dir) -> list:
    """Manifest-ordered entries with status 'ok'."""
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "MANIFEST.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no MANIFEST.tsv under {corpus_dir}")
    entries = []
    with open(manifest) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != MANIFEST_COLUMNS:
            raise ValueError(f"unexpected manifest columns {header}")
        for line in fh:
            vals = dict(zip(header, line.rstrip("\n").split("\t")))
            if vals["status"] != "ok":
                continue
            entries.append(CorpusEntry(
                model_id=vals["id"],
                architecture_id=vals["architecture_id"],
                label=int(vals["label"]),
                seed=int(vals["seed"]),
                clean_acc=float(vals["clean_acc"]),
                trigger_acc=None if vals["trigger_acc"] == "na" else float(vals["trigger_acc"]),
                status=vals["status"],
                model_path=corpus_dir / "models" / f"{vals['id']}.prnt",
                eval_dir=corpus_dir / "eval" / vals["id"],
            ))
    entries.sort(key=lambda e: e.model_id)
    return entries


def entries_by_architecture(entries) -> dict:
    by_arch = {}
    for e in entries:
        by_arch.setdefault(e.architecture_id, []).append(e)
    return by_arch


def model_paths(corpus_dir):
    return sorted(Path(corpus_dir, "models").glob("*.prnt"),
                  key=lambda p: p.name)


def default_jobs() -> int:
    return max(1, min(8, os.cpu_count() or 1))
