"""Command-line entry point.

    hybrid-distill [--config FILE] [--seed N] [--out DIR] [--jobs N] VERB [verb options]

Verbs: train-teacher, score-heads, build-hybrid, distill, evaluate, memory-report, sweep.
Exit codes: 0 ok, 1 usage / I/O / validation error, 2 convergence failure.

Every artifact is a pure function of (config, seed, inputs); wall-clock timestamps only
go to ``<out>/<verb>.log``.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path
from typing import Iterable, Sequence

from . import __version__
from .ablation import ImportanceRecord, ImportanceTable
from .checkpoint import CheckpointError, Provenance, blob_sha256, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, schema_text
from .distill import TRACE_COLUMNS, ConvergenceError, MetricsTrace
from .evalkit import REFERENCE_SPECS, MemorySpec, memory_footprint, memory_spec_for, sweep_state_size, SWEEP_COLUMNS
from .model import HybridLayout, build_student

log = logging.getLogger("hybrid_distill")

EXIT_OK, EXIT_USAGE, EXIT_CONVERGENCE = 0, 1, 2

IMPORTANCE_COLUMNS = ("rank", "layer", "head", "kind", "ablated_acc", "drop", "baseline_acc")
MEMORY_COLUMNS = ("model", "n_ssm", "d_state", "n_kv", "d_head", "bytes_per_elem", "state_bytes",
                  "kv_bytes_per_token", "L", "bytes", "KiB", "MB")

OUT_ENV = "HYBRID_DISTILL_OUT"


class UsageError(Exception):
    pass


# --- CSV ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)  # shortest round-trip form: stable across runs and exact on reload
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def importance_rows(table: ImportanceTable) -> list[dict]:
    return [{"rank": i + 1, "layer": r.layer, "head": r.head, "kind": r.head_kind,
             "ablated_acc": r.ablated_accuracy, "drop": r.drop, "baseline_acc": table.baseline_accuracy}
            for i, r in enumerate(table.records)]


def read_importance(path: Path) -> ImportanceTable:
    rows = read_csv(path)
    if not rows or tuple(rows[0].keys()) != IMPORTANCE_COLUMNS:
        raise UsageError(f"{path}: not an importance table (expected header {','.join(IMPORTANCE_COLUMNS)})")
    recs = [ImportanceRecord(int(r["layer"]), int(r["head"]), r["kind"], float(r["ablated_acc"]), float(r["drop"]))
            for r in rows]
    return ImportanceTable(float(rows[0]["baseline_acc"]), recs)


def trace_rows(trace: MetricsTrace) -> list[dict]:
    return trace.rows


# --- helpers ------------------------------------------------------------------------


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return path


def _load(path: Path, what: str):
    _require(path / "manifest.json", what)
    return load_checkpoint(path)


def _setup_logging(out: Path, verb: str) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / f"{verb}.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


# --- verbs -------------------------------------------------------------------------


def cmd_train_teacher(run: RunConfig, out: Path, args) -> int:
    from .experiments import eval_sets, run_teacher

    model, trace, ok = run_teacher(run, eval_sets(run))
    save_checkpoint(model, out / "teacher", Provenance("teacher", run.teacher.total_steps, run.seed))
    write_csv(out / "teacher_metrics.csv", TRACE_COLUMNS, trace_rows(trace))
    acc = trace.last("probe_acc")
    log.info("teacher probe accuracy %s (target %s)", acc, run.teacher_target)
    print(f"teacher probe_acc={acc:.4f} target={run.teacher_target} -> {out / 'teacher'}")
    if not ok:
        print(f"error: teacher did not reach probe accuracy {run.teacher_target}", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_score_heads(run: RunConfig, out: Path, args) -> int:
    from .experiments import eval_sets, score_heads

    model, _ = _load(Path(args.model or out / "teacher"), "checkpoint")
    table = score_heads(model, eval_sets(run))
    path = out / (args.output or "importance.csv")
    write_csv(path, IMPORTANCE_COLUMNS, importance_rows(table))
    print(f"baseline probe_acc={table.baseline_accuracy:.4f}; {len(table.records)} heads -> {path}")
    return EXIT_OK


def cmd_build_hybrid(run: RunConfig, out: Path, args) -> int:
    from .experiments import layout_for

    teacher_dir = Path(args.teacher or out / "teacher")
    teacher, _ = _load(teacher_dir, "teacher checkpoint")
    strategy = args.strategy or run.placement["strategy"]
    k = run.placement["budget"] if args.k is None else args.k
    if not 0 <= k <= teacher.cfg.total_heads:
        raise UsageError(f"k={k} outside [0, {teacher.cfg.total_heads}]")
    importance = None
    if strategy == "retrieval_aware":
        importance = read_importance(_require(Path(args.importance or out / "importance.csv"), "importance CSV"))
    spec = layout_for(run, importance, strategy, budget=k, seed=run.seed)
    if strategy == "annealed":
        raise UsageError("annealed placement is a multi-stage schedule; run it through `sweep` (kind=placement)")
    student = build_student(teacher, spec.layout, seed=run.seed, d_state=run.student_d_state)
    prov = Provenance("built", 0, run.seed, blob_sha256(teacher_dir), {"strategy": strategy, "k": k})
    save_checkpoint(student, out / "student_init", prov)
    print(f"{strategy} k={k}: {spec.layout.n_attention} attention heads {spec.layout.heads} -> {out / 'student_init'}")
    return EXIT_OK


def cmd_distill(run: RunConfig, out: Path, args) -> int:
    from .experiments import distill_student, eval_sets

    teacher_dir = Path(args.teacher or out / "teacher")
    teacher, _ = _load(teacher_dir, "teacher checkpoint")
    student, manifest = _load(Path(args.student or out / "student_init"), "student checkpoint")
    if student.cfg.replace(d_state=None) != teacher.cfg.replace(d_state=None):
        raise UsageError("student and teacher configs differ")
    trained, trace = distill_student(run, teacher, student.layout, run.seed, eval_sets(run),
                                     d_state=student.cfg.d_state, student=student)
    last = run.plan.stages[-1].name if run.plan.stages else "built"
    save_checkpoint(trained, out / "student", Provenance(last, run.plan.total_steps, run.seed, blob_sha256(teacher_dir),
                                                         manifest["provenance"].get("extra", {})))
    write_csv(out / "student_metrics.csv", TRACE_COLUMNS, trace_rows(trace))
    print(f"student probe_acc={trace.last('probe_acc')} -> {out / 'student'}")
    return EXIT_OK


def cmd_evaluate(run: RunConfig, out: Path, args) -> int:
    from .experiments import EVAL_COLUMNS, eval_sets, evaluate

    teacher_dir = Path(args.teacher or out / "teacher")
    teacher, _ = _load(teacher_dir, "teacher checkpoint")
    targets = args.model or [str(out / "student")]
    sets = eval_sets(run)
    rows = []
    for path in targets:
        model, _ = _load(Path(path), "checkpoint")
        rows.append(evaluate(run, model, sets, teacher, name=Path(path).name))
    write_csv(out / "evaluation.csv", EVAL_COLUMNS, rows)
    for r in rows:
        print(", ".join(f"{c}={_fmt(r[c])}" for c in EVAL_COLUMNS))
    return EXIT_OK


def memory_report_rows(specs: Sequence[MemorySpec], lengths: Sequence[int]) -> list[dict]:
    rows = []
    for s in specs:
        for L in lengths:
            fp = memory_footprint(s, L)
            rows.append({"model": s.name, "n_ssm": s.n_ssm, "d_state": s.d_state, "n_kv": s.n_kv, "d_head": s.d_head,
                         "bytes_per_elem": s.bytes_per_elem, "state_bytes": s.state_bytes,
                         "kv_bytes_per_token": s.kv_bytes_per_token, "L": L, "bytes": fp.bytes,
                         "KiB": fp.kib, "MB": round(fp.mb, 1)})
    return rows


def memory_grid(specs: Sequence[MemorySpec], lengths: Sequence[int]) -> str:
    width = max(len(s.name) for s in specs) + 2
    lines = ["model".ljust(width) + "".join(f"L={L}".rjust(12) for L in lengths)]
    for s in specs:
        lines.append(s.name.ljust(width) + "".join(memory_footprint(s, L).mb_str().rjust(12) for L in lengths))
    return "\n".join(lines)


def cmd_memory_report(run: RunConfig, out: Path, args) -> int:
    lengths = run.memory["lengths"]
    if run.memory["specs"] == "reference":
        specs = list(REFERENCE_SPECS)
    else:
        ks = run.sweep["ks"]
        specs = [memory_spec_for(run.model, HybridLayout.from_heads(
            run.model, [(i // run.model.n_heads, i % run.model.n_heads) for i in range(k)]),
            bytes_per_elem=8, d_state=run.student_d_state) for k in ks]
    write_csv(out / "memory.csv", MEMORY_COLUMNS, memory_report_rows(specs, lengths))
    grid = memory_grid(specs, lengths)
    (out / "memory_grid.txt").write_text(grid + "\n", encoding="utf-8")
    print(grid)
    return EXIT_OK


def cmd_sweep(run: RunConfig, out: Path, args) -> int:
    from .experiments import SWEEP_K_COLUMNS, eval_sets, k_sweep, layout_for, placement_sweep

    teacher, _ = _load(Path(args.teacher or out / "teacher"), "teacher checkpoint")
    importance = read_importance(_require(Path(args.importance or out / "importance.csv"), "importance CSV"))
    kind = args.kind or run.sweep["kind"]
    seeds = run.sweep["seeds"]
    if kind == "k":
        rows = k_sweep(run, teacher, importance, run.sweep["ks"], seeds, args.jobs)
        write_csv(out / "sweep_k.csv", SWEEP_K_COLUMNS, rows)
    elif kind == "placement":
        rows = placement_sweep(run, teacher, importance, run.placement["budget"], seeds,
                               run.sweep["strategies"], strides=(run.placement["stride"],), n_workers=args.jobs)
        write_csv(out / "sweep_placement.csv", SWEEP_K_COLUMNS, rows)
    else:
        sets = eval_sets(run)
        layout = layout_for(run, importance, "retrieval_aware").layout
        rows = []
        for s in seeds:
            cfg = run.distill.replace(seed=s)
            for r in sweep_state_size(teacher, layout, run.sweep["d_states"], run.plan, cfg, run.task,
                                      sets.probe, sets.ppl, memory_L=run.eval["memory_L"]):
                rows.append({"seed": s, **r})
        write_csv(out / "sweep_d_state.csv", ("seed",) + SWEEP_COLUMNS, rows)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{kind} sweep: {len(rows)} runs, {len(failed)} failed -> {out}")
    return EXIT_OK


VERBS = {
    "train-teacher": cmd_train_teacher,
    "score-heads": cmd_score_heads,
    "build-hybrid": cmd_build_hybrid,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "memory-report": cmd_memory_report,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the verb
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI config file (see --print-schema)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides [run] seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help=f"output dir; overrides [run] out and ${OUT_ENV}")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes for sweeps")

    p = argparse.ArgumentParser(prog="hybrid-distill", parents=[common],
                                description="Retrieval-aware attention/SSM hybrid distillation lab.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--print-schema", action="store_true", help="print the documented config schema and exit")
    sub = p.add_subparsers(dest="verb", metavar="VERB")

    sub.add_parser("train-teacher", parents=[common], help="train the all-attention teacher")
    s = sub.add_parser("score-heads", parents=[common], help="ablate every head on the probe")
    s.add_argument("--model", help="checkpoint dir (default <out>/teacher)")
    s.add_argument("--output", help="CSV file name inside <out> (default importance.csv)")
    s = sub.add_parser("build-hybrid", parents=[common], help="build a student from the teacher")
    s.add_argument("--teacher", help="teacher checkpoint dir (default <out>/teacher)")
    s.add_argument("--importance", help="importance CSV (default <out>/importance.csv)")
    s.add_argument("--k", type=int, help="attention heads to keep (default [placement] budget)")
    s.add_argument("--strategy", choices=("retrieval_aware", "fixed_interleave", "random"),
                   help="head placement (default [placement] strategy)")
    s = sub.add_parser("distill", parents=[common], help="run alignment + KD on the built student")
    s.add_argument("--teacher", help="teacher checkpoint dir (default <out>/teacher)")
    s.add_argument("--student", help="built student checkpoint dir (default <out>/student_init)")
    s = sub.add_parser("evaluate", parents=[common], help="probe accuracy, perplexities, coverage, memory")
    s.add_argument("--teacher", help="teacher checkpoint dir (default <out>/teacher)")
    s.add_argument("--model", action="append", help="checkpoint dir (repeatable; default <out>/student)")
    sub.add_parser("memory-report", parents=[common], help="analytical memory table")
    s = sub.add_parser("sweep", parents=[common], help="k, placement or d_state sweep")
    s.add_argument("--teacher", help="teacher checkpoint dir (default <out>/teacher)")
    s.add_argument("--importance", help="importance CSV (default <out>/importance.csv)")
    s.add_argument("--kind", choices=("k", "d_state", "placement"), help="sweep to run (default [sweep] kind)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; usage errors are 1 here
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if getattr(args, "print_schema", False):
        print(schema_text())
        return EXIT_OK
    if not args.verb:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    args.jobs = getattr(args, "jobs", 1)
    try:
        overrides = {}
        if hasattr(args, "seed"):
            overrides["run.seed"] = args.seed
        run = load_config(getattr(args, "config", None), overrides)
        out = Path(getattr(args, "out", None) or os.environ.get(OUT_ENV) or run.out)
        handler = _setup_logging(out, args.verb)
        try:
            log.info("hybrid-distill %s %s seed=%d", __version__, args.verb, run.seed)
            return VERBS[args.verb](run, out, args)
        finally:
            log.removeHandler(handler)
            handler.close()
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
