"""Command-line pipeline: forge -> qa -> measure -> search -> detect -> report.

Run configuration is a plain key=value file with [forge], [search] and
[detect] sections; unknown sections or keys are hard errors, and every
command echoes its resolved configuration for reproducibility.

Exit codes: detect uses 0 = clean, 1 = poisoned, 2 = error; every other
subcommand returns 0 on success and 2 on error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import detector, forge, qa, store
from .detector import RegressionMapping, SearchBudget, fit_mapping, predict
from .probe import measure, write_signals
from .pruning import PruningConfig


class CliError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

SECTION_KEYS = {
    "forge": {"archs", "models_per_arch", "poison_fraction", "epochs", "lr", "seed",
              "per_class_count", "eval_per_class", "height", "width", "batch_size",
              "trigger_target_rule"},
    "search": {"pm", "sm", "rm", "p", "exec", "fixed_exec", "trim_k", "t_max",
               "seed", "split_seed"},
    "detect": {"pm", "sm", "rm", "p", "s", "d", "trim_k", "t_max", "seed"},
}

FORGE_DEFAULTS = {
    "archs": "toycnn-a,toycnn-b",
    "models_per_arch": "4",
    "poison_fraction": "0.5",
    "epochs": "12",
    "lr": "0.1",
    "seed": "0",
    "per_class_count": "60",
    "eval_per_class": "10",
    "height": "24",
    "width": "24",
    "batch_size": "32",
    "trigger_target_rule": "seeded",
}

SEARCH_DEFAULTS = {
    "pm": "remove,reset,trim",
    "sm": "targeted",
    "rm": "l1",
    "p": "0.0625,0.2",
    "exec": "5:10,10:10,10:20",
    "fixed_exec": "5:10",
    "trim_k": "0.5",
    "t_max": "60",
    "seed": "0",
    "split_seed": "0",
}

DETECT_DEFAULTS = {
    "pm": "remove",
    "sm": "targeted",
    "rm": "l1",
    "p": "0.0625",
    "s": "5",
    "d": "10",
    "trim_k": "0.5",
    "t_max": "60",
    "seed": "0",
}

_DEFAULTS = {"forge": FORGE_DEFAULTS, "search": SEARCH_DEFAULTS, "detect": DETECT_DEFAULTS}


def parse_config_file(path) -> dict:
    """Strict key=value parser; unknown sections/keys are hard errors."""
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in SECTION_KEYS:
                raise CliError(f"{path}:{lineno}: unknown section [{name}]")
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        if current is None:
            raise CliError(f"{path}:{lineno}: key outside any section")
        key, value = (part.strip() for part in line.split("=", 1))
        section = [s for s, d in sections.items() if d is current][0]
        if key not in SECTION_KEYS[section]:
            raise CliError(f"{path}:{lineno}: unknown key {key!r} in [{section}]")
        if key in current:
            raise CliError(f"{path}:{lineno}: duplicate key {key!r}")
        current[key] = value
    return sections


def resolve_section(sections, name) -> dict:
    out = dict(_DEFAULTS[name])
    out.update(sections.get(name, {}))
    return out


def echo_lines(name, resolved):
    return [f"{name}.{k}={resolved[k]}" for k in sorted(resolved)]


def _echo(lines):
    for line in lines:
        print(f"resolved-config {line}")


def _floats(text):
    return tuple(float(x) for x in text.split(","))


def _pairs(text):
    out = []
    for token in text.split(","):
        s, d = token.split(":")
        out.append((int(s), int(d)))
    return tuple(out)


def detect_config_from(resolved) -> PruningConfig:
    return PruningConfig(
        pm=resolved["pm"], sm=resolved["sm"], rm=resolved["rm"],
        p=float(resolved["p"]), num_samples=int(resolved["s"]),
        num_images=int(resolved["d"]), trim_k=float(resolved["trim_k"]),
        seed=int(resolved["seed"]))


def budget_from(resolved) -> SearchBudget:
    return SearchBudget(
        pms=tuple(resolved["pm"].split(",")),
        sms=tuple(resolved["sm"].split(",")),
        rms=tuple(resolved["rm"].split(",")),
        ps=_floats(resolved["p"]),
        exec_grid=_pairs(resolved["exec"]),
        fixed_low_exec=_pairs(resolved["fixed_exec"])[0],
        t_max_seconds=float(resolved["t_max"]),
        trim_k=float(resolved["trim_k"]),
        config_seed=int(resolved["seed"]))


# ---------------------------------------------------------------------------
# Mapping and winner files (config-file syntax)
# ---------------------------------------------------------------------------

def save_mapping(mapping: RegressionMapping, path):
    with open(path, "w") as fh:
        fh.write("[mapping]\n")
        fh.write(f"architecture_id = {mapping.architecture_id}\n")
        fh.write(f"num_samples = {mapping.num_samples}\n")
        fh.write(f"training_set_size = {mapping.training_set_size}\n")
        fh.write(f"ridge = {str(mapping.ridge).lower()}\n")
        coeffs = ",".join(repr(float(b)) for b in mapping.coefficients)
        fh.write(f"coefficients = {coeffs}\n")


def load_mapping(path) -> RegressionMapping:
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith("["):
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    try:
        return RegressionMapping(
            coefficients=np.asarray([float(x) for x in values["coefficients"].split(",")]),
            num_samples=int(values["num_samples"]),
            architecture_id=values.get("architecture_id", ""),
            training_set_size=int(values.get("training_set_size", 0)),
            ridge=values.get("ridge", "false") == "true")
    except (KeyError, ValueError) as e:
        raise CliError(f"bad mapping file {path}: {e}") from None


def save_winner_config(config: PruningConfig, path):
    with open(path, "w") as fh:
        fh.write("[detect]\n")
        fh.write(f"pm = {config.pm.value}\n")
        fh.write(f"sm = {config.sm.value}\n")
        fh.write(f"rm = {config.rm.value}\n")
        fh.write(f"p = {config.p!r}\n")
        fh.write(f"s = {config.num_samples}\n")
        fh.write(f"d = {config.num_images}\n")
        fh.write(f"trim_k = {config.trim_k!r}\n")
        fh.write(f"seed = {config.seed}\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_forge(args) -> int:
    resolved = resolve_section(parse_config_file(args.config), "forge")
    _echo(echo_lines("forge", resolved))
    rows = forge.forge_corpus(
        args.out,
        arch_ids=resolved["archs"].split(","),
        models_per_arch=int(resolved["models_per_arch"]),
        poison_fraction=float(resolved["poison_fraction"]),
        epochs=int(resolved["epochs"]),
        lr=float(resolved["lr"]),
        seed=int(resolved["seed"]),
        trigger_target_rule=resolved["trigger_target_rule"],
        per_class_count=int(resolved["per_class_count"]),
        eval_per_class=int(resolved["eval_per_class"]),
        height=int(resolved["height"]),
        width=int(resolved["width"]),
        batch_size=int(resolved["batch_size"]),
        jobs=args.jobs,
    )
    ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"forged {ok}/{len(rows)} models into {args.out}")
    return 0


def cmd_qa(args) -> int:
    if args.write_table:
        if not args.corpus:
            raise CliError("--write-table requires --corpus")
        table = qa.build_reference_table(args.corpus)
        table.save(args.write_table)
        print(f"reference table with {len(table.rows)} architectures -> {args.write_table}")
        return 0
    if not args.table:
        raise CliError("qa check requires --table (or use --write-table to build one)")
    table = qa.ReferenceTable.load(args.table)
    if args.model:
        paths = [Path(args.model)]
    elif args.corpus:
        paths = forge.model_paths(args.corpus)
    else:
        raise CliError("qa requires --model or --corpus")
    failures = 0
    for path in paths:
        report = qa.qa_check(path, table)
        status = "ok" if (report.size_ok and report.graph_ok) else "FLAGGED"
        print(f"{path.name}\t{status}\t" + "\t".join(report.as_lines()))
        failures += 0 if status == "ok" else 1
    print(f"qa checked {len(paths)} model(s), {failures} flagged")
    return 0


def cmd_measure(args) -> int:
    resolved = resolve_section(parse_config_file(args.config), "detect")
    lines = echo_lines("detect", resolved)
    _echo(lines)
    config = detect_config_from(resolved)
    entries = forge.load_corpus(args.corpus)
    if not entries:
        raise CliError(f"corpus {args.corpus} has no usable models")
    tasks = [(e.model_path, e.eval_dir, config, e.model_id) for e in entries]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            signals = list(pool.map(_measure_task, tasks))
    else:
        signals = [_measure_task(t) for t in tasks]
    write_signals(args.out, signals, lines)
    print(f"measured {len(signals)} models -> {args.out}")
    return 0


def _measure_task(task):
    model_path, eval_dir, config, model_id = task
    images, labels = forge._read_eval(eval_dir)
    return measure(store.load(model_path), config, images, labels, model_id)


def cmd_search(args) -> int:
    resolved = resolve_section(parse_config_file(args.config), "search")
    lines = echo_lines("search", resolved)
    _echo(lines)
    budget = budget_from(resolved)
    split_seed = int(resolved["split_seed"])
    entries = forge.load_corpus(args.corpus)
    by_arch = forge.entries_by_architecture(entries)
    result = detector.staged_search(budget, by_arch, split_seed, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    detector.write_leaderboard(out / "leaderboard.tsv", result, lines)
    with open(out / "winners.tsv", "w") as fh:
        fh.write("architecture_id\tpm\tsm\trm\tp\ts\td\ttrim_k\tseed\t"
                 "accuracy\tmean_ce\ttrain_ce\tmean_exec\tmean_elapsed_s\n")
        for arch in sorted(result.per_arch):
            res = result.per_arch[arch]
            if res.winner is None:
                print(f"{arch}: no feasible configuration")
                fh.write(f"{arch}\tnone\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-\t-\n")
                continue
            ev = res.winner
            c = ev.config
            mean_elapsed = float(np.mean([r.elapsed_seconds for r in ev.records]))
            fh.write("\t".join([
                arch, c.pm.value, c.sm.value, c.rm.value, repr(c.p),
                str(c.num_samples), str(c.num_images), repr(c.trim_k), str(c.seed),
                repr(1.0 - ev.mean_error), repr(ev.mean_ce), repr(ev.train_ce),
                repr(ev.mean_exec), repr(mean_elapsed)]) + "\n")
            save_winner_config(c, out / f"winner_{arch}.cfg")
            labels = [r.label for r in ev.records]
            mapping = fit_mapping(list(zip(ev.signals, labels)), arch)
            save_mapping(mapping, out / f"mapping_{arch}.cfg")
            print(f"{arch}: winner {c.canonical()} "
                  f"acc={1.0 - ev.mean_error:.4f} ce={ev.mean_ce:.4f}")
    print(f"search artifacts -> {out}")
    return 0


def cmd_detect(args) -> int:
    resolved = resolve_section(parse_config_file(args.config), "detect")
    _echo(echo_lines("detect", resolved))
    config = detect_config_from(resolved)
    mapping = load_mapping(args.mapping)
    if mapping.num_samples != config.num_samples:
        raise CliError(f"mapping |S|={mapping.num_samples} does not match "
                       f"config s={config.num_samples}")
    t0 = time.perf_counter()
    qa_lines = ["qa=skipped (no table)"]
    if args.table:
        report = qa.qa_check(args.model, qa.ReferenceTable.load(args.table))
        qa_lines = report.as_lines()
    model = store.load(args.model)
    images, labels = forge._read_eval(args.eval)
    signal = measure(model, config, images, labels, Path(args.model).stem)
    f = predict(mapping, signal)
    verdict = "POISONED" if f >= 0.5 else "CLEAN"
    elapsed = time.perf_counter() - t0
    print(f"verdict={verdict}")
    print(f"probability={f:.6f}")
    for line in qa_lines:
        print(line)
    print(f"elapsed_seconds={elapsed:.3f}")
    return 1 if verdict == "POISONED" else 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    winners = run_dir / "winners.tsv"
    if not winners.exists():
        raise CliError(f"{winners} not found (run `prunetect search` first)")
    rows = []
    with open(winners) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            rows.append(dict(zip(header, line.rstrip("\n").split("\t"))))
    found = [r for r in rows if r["pm"] != "none"]
    lines = ["architecture_id\taccuracy\tmean_ce\tmean_elapsed_s"]
    for r in rows:
        if r["pm"] == "none":
            lines.append(f"{r['architecture_id']}\tno-feasible-config\t-\t-")
        else:
            lines.append(f"{r['architecture_id']}\t{r['accuracy']}\t{r['mean_ce']}\t"
                         f"{r['mean_elapsed_s']}")
    if found:
        acc = np.mean([float(r["accuracy"]) for r in found])
        ce = np.mean([float(r["mean_ce"]) for r in found])
        el = np.mean([float(r["mean_elapsed_s"]) for r in found])
        lines.append(f"average\t{acc!r}\t{ce!r}\t{el!r}")
    text = "\n".join(lines)
    out_path = run_dir / "report.tsv"
    Path(out_path).write_text(text + "\n")
    widths = [max(len(row.split("\t")[i]) for row in lines) for i in range(4)]
    for row in lines:
        cells = row.split("\t")
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    print(f"report -> {out_path}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunetect",
        description="Pruning-based trojan detection for small CNN models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="train a labeled clean/poisoned model corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_forge)

    p = sub.add_parser("qa", help="check models against a reference table")
    p.add_argument("--model")
    p.add_argument("--corpus")
    p.add_argument("--table")
    p.add_argument("--write-table", help="build the table from --corpus instead of checking")
    p.set_defaults(func=cmd_qa)

    p = sub.add_parser("measure", help="measure pruned-accuracy signal vectors")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("search", help="staged configuration search over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("detect", help="classify one model as clean or poisoned")
    p.add_argument("--model", required=True)
    p.add_argument("--eval", required=True, help="directory with the model's clean eval images")
    p.add_argument("--mapping", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--table")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="summarize a search run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        raise
    except Exception as e:  # single-line actionable message, exit code 2
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
