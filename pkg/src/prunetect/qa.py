"""Pre-detection quality assurance against per-architecture references.

A reference table stores file-size statistics and the graph-fingerprint
digest for each architecture. Checks are advisory: a failed check
annotates the detection report but never blocks it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from . import store
from .forge import model_paths

SIZE_SIGMA = 3.0
SIZE_FLOOR_BYTES = 1.0


class QaError(ValueError):
    pass


@dataclass
class ReferenceRow:
    mean_size_bytes: float
    stdev_size_bytes: float
    fingerprint_digest: str
    sample_count: int


@dataclass
class QaReport:
    size_ok: bool
    graph_ok: bool
    details: dict

    def as_lines(self):
        out = [f"qa.size_ok={str(self.size_ok).lower()}",
               f"qa.graph_ok={str(self.graph_ok).lower()}"]
        out += [f"qa.{k}={v}" for k, v in sorted(self.details.items())]
        return out


class ReferenceTable:
    """One row per architecture_id."""

    def __init__(self, rows: dict | None = None):
        self.rows = dict(rows or {})

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("architecture_id\tmean_size\tstdev_size\tdigest_hex\tsample_count\n")
            for arch in sorted(self.rows):
                r = self.rows[arch]
                fh.write(f"{arch}\t{r.mean_size_bytes!r}\t{r.stdev_size_bytes!r}\t"
                         f"{r.fingerprint_digest}\t{r.sample_count}\n")

    @classmethod
    def load(cls, path):
        rows = {}
        with open(path) as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if header != ["architecture_id", "mean_size", "stdev_size",
                          "digest_hex", "sample_count"]:
                raise QaError(f"unexpected reference table header {header}")
            for line in fh:
                arch, mean, stdev, digest, count = line.rstrip("\n").split("\t")
                rows[arch] = ReferenceRow(float(mean), float(stdev), digest, int(count))
        return cls(rows)


def build_reference_table(corpus_dir) -> ReferenceTable:
    """Population size statistics and the shared fingerprint per architecture.

    A fingerprint disagreement within an architecture means the corpus is
    corrupt and raises.
    """
    sizes: dict[str, list] = {}
    digests: dict[str, str] = {}
    firsts: dict[str, Path] = {}
    for path in model_paths(corpus_dir):
        model = store.load(path)
        arch = model.architecture_id
        digest = store.fingerprint(model).digest
        if arch in digests:
            if digest != digests[arch]:
                raise QaError(f"fingerprint disagreement within {arch}: "
                              f"{path.name} vs {firsts[arch].name}")
        else:
            digests[arch] = digest
            firsts[arch] = path
        sizes.setdefault(arch, []).append(os.path.getsize(path))
    if not sizes:
        raise QaError(f"no models found under {corpus_dir}")
    rows = {}
    for arch, vals in sizes.items():
        if len(vals) < 2:
            raise QaError(f"architecture {arch} has {len(vals)} model(s); need >= 2")
        n = len(vals)
        mean = sum(vals) / n
        var = sum((v - mean) ** 2 for v in vals) / n  # population
        rows[arch] = ReferenceRow(mean, var ** 0.5, digests[arch], n)
    return ReferenceTable(rows)


def qa_check(model_path, table: ReferenceTable) -> QaReport:
    """Size and graph checks for one model file against the table."""
    model = store.load(model_path)  # unreadable files raise here
    size = os.path.getsize(model_path)
    arch = model.architecture_id
    row = table.rows.get(arch)
    if row is None:
        return QaReport(False, False, {
            "architecture_id": arch,
            "reason": "unknown architecture (no reference row)",
            "size_bytes": str(size),
        })
    tolerance = max(SIZE_SIGMA * row.stdev_size_bytes, SIZE_FLOOR_BYTES)
    size_ok = abs(size - row.mean_size_bytes) <= tolerance
    digest = store.fingerprint(model).digest
    graph_ok = digest == row.fingerprint_digest
    details = {
        "architecture_id": arch,
        "size_bytes": str(size),
        "size_mean": repr(row.mean_size_bytes),
        "size_tolerance": repr(tolerance),
        "digest": digest[:16],
        "reference_digest": row.fingerprint_digest[:16],
    }
    return QaReport(size_ok, graph_ok, details)
