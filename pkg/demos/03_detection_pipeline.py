"""End-to-end detection on a small forged corpus.

Forges 14 labeled models of one architecture, runs the QA gate, searches
the pruning-configuration space for the best detector, and classifies
every model with the winning mapping. A desk-scale version of the full
workflow; the CLI wraps the same steps for directories of models.

Run:  python demos/03_detection_pipeline.py   (a few minutes)
"""

import tempfile

import numpy as np

from prunetect import forge, qa
from prunetect.detector import SearchBudget, fit_mapping, measure_corpus, predict, \
    staged_search

with tempfile.TemporaryDirectory() as scratch:
    print("== forge: 14 models of toycnn-a, half poisoned ==")
    rows = forge.forge_corpus(scratch, ["toycnn-a"], models_per_arch=14,
                              poison_fraction=0.5, seed=5,
                              jobs=forge.default_jobs())
    for row in rows:
        trig = "" if row["trigger_acc"] is None else f" trigger_acc={row['trigger_acc']:.2f}"
        print(f"  {row['id']} label={row['label']} clean_acc={row['clean_acc']:.2f}{trig}")

    print("\n== QA gate against the corpus reference table ==")
    table = qa.build_reference_table(scratch)
    flagged = 0
    for path in forge.model_paths(scratch):
        report = qa.qa_check(path, table)
        flagged += not (report.size_ok and report.graph_ok)
    print(f"{flagged} of {len(forge.model_paths(scratch))} models flagged "
          "(0 expected: only weights differ)")

    print("\n== staged search: pick the pruning configuration ==")
    budget = SearchBudget(pms=("remove", "reset", "trim"), sms=("targeted",),
                          rms=("l1", "stdev"), ps=(0.0625, 0.2),
                          exec_grid=((5, 10), (5, 25), (5, 50)),
                          fixed_low_exec=(5, 10))
    entries = forge.load_corpus(scratch)
    result = staged_search(budget, {"toycnn-a": entries}, split_seed=0,
                           jobs=forge.default_jobs())
    res = result.per_arch["toycnn-a"]
    for stage, ev in res.evaluations:
        c = ev.config
        print(f"  stage {stage}: {c.canonical():60s} cv-acc={1 - ev.mean_error:.2f} "
              f"cv-ce={ev.mean_ce:.3f}")
    winner = res.winner
    print(f"winner: {winner.config.canonical()}")
    print(f"cross-validated accuracy {1 - winner.mean_error:.2f}, "
          f"CE {winner.mean_ce:.3f} (0.6931 = random guessing)")

    print("\n== verdicts from the winner's full-corpus mapping ==")
    labels = np.array([e.label for e in entries])
    signals = measure_corpus(winner.config, entries)
    mapping = fit_mapping(list(zip(signals, labels)), "toycnn-a")
    for entry, sig in zip(entries, signals):
        f = predict(mapping, sig)
        verdict = "POISONED" if f >= 0.5 else "CLEAN"
        mark = "ok" if (f >= 0.5) == bool(entry.label) else "MISS"
        print(f"  {entry.model_id} label={entry.label} f={f:.3f} -> {verdict:8s} {mark}")
