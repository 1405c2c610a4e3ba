"""Experiment orchestration shared by the CLI, the scripts and the acceptance suite:
teacher training, head scoring, student distillation, evaluation and the sweeps."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch

from .ablation import ImportanceTable, score_all_heads
from .checkpoint import Provenance, load_checkpoint, save_checkpoint
from .config import RunConfig
from .distill import ConvergenceError, EvalHooks, MetricsTrace, hash_seed, run_pipeline, train_teacher, TeacherTarget
from .evalkit import (
    TaskScore,
    coverage,
    eval_perplexity,
    eval_probe_accuracy,
    make_placement,
    memory_footprint,
    memory_spec_for,
)
from .model import HybridLayout, HybridLM
from .taskgen import SequenceBatch, gen_mixture, gen_probe, stack

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalSets:
    probe: SequenceBatch  # retrieval rows, n_pairs in [min_pairs, max_pairs]
    ppl: SequenceBatch  # half retrieval, half filler


def eval_sets(run: RunConfig, seed_offset: int = 0) -> EvalSets:
    """Held-out sets drawn from ``probe_seed`` (shifted by ``seed_offset`` for re-evaluation)."""
    seed = run.eval["probe_seed"] + seed_offset
    probe = gen_probe(hash_seed(seed, 1), run.eval["probe_size"], run.task)
    ppl = stack(gen_mixture(hash_seed(seed, 2), run.eval["ppl_size"], 0.5, run.task))
    return EvalSets(probe, ppl)


def hooks_for(sets: EvalSets, probe_rows: int = 256) -> EvalHooks:
    """Training-time hooks evaluate on a prefix of the probe to keep periodic evals cheap."""
    return EvalHooks(sets.probe.select(range(min(probe_rows, len(sets.probe)))), sets.ppl)


def run_teacher(run: RunConfig, sets: EvalSets | None = None) -> tuple[HybridLM, MetricsTrace, bool]:
    sets = sets or eval_sets(run)
    return train_teacher(run.model, run.teacher, run.task, hooks_for(sets), TeacherTarget(run.teacher_target))


def score_heads(model: HybridLM, sets: EvalSets) -> ImportanceTable:
    return score_all_heads(model, sets.probe)


def layout_for(run: RunConfig, importance: ImportanceTable | None, strategy: str | None = None,
               budget: int | None = None, seed: int = 0, stride: int | None = None, offset: int | None = None):
    p = run.placement
    return make_placement(strategy or p["strategy"], run.model, importance,
                          p["budget"] if budget is None else budget,
                          stride=p["stride"] if stride is None else stride,
                          offset=p["offset"] if offset is None else offset, seed=seed)


def distill_student(run: RunConfig, teacher: HybridLM, layout: HybridLayout, seed: int,
                    sets: EvalSets | None = None, d_state: int | None = None,
                    student: HybridLM | None = None) -> tuple[HybridLM, MetricsTrace]:
    sets = sets or eval_sets(run)
    cfg = run.distill.replace(seed=seed)
    d_state = run.student_d_state if d_state is None else d_state
    return run_pipeline(teacher, layout, run.plan, cfg, run.task, hooks_for(sets), d_state=d_state, student=student)


def distill_annealed(run: RunConfig, teacher: HybridLM, schedule: Sequence[HybridLayout], seed: int,
                     sets: EvalSets | None = None) -> tuple[HybridLM, MetricsTrace]:
    """Progressive replacement: each stage distills from the previous stage's student."""
    source, trace = teacher, MetricsTrace()
    for layout in schedule:
        source, stage_trace = distill_student(run, source, layout, seed, sets)
        trace.rows.extend(stage_trace.rows)
    return source, trace


EVAL_COLUMNS = ("model", "probe_acc", "ppl_overall", "ppl_retrieval", "ppl_filler", "coverage_retrieval",
                "coverage_knowledge", "n_attention", "state_bytes", "kv_bytes_per_token", "memory_bytes")


def evaluate(run: RunConfig, model: HybridLM, sets: EvalSets, teacher: HybridLM | None = None,
             name: str = "model", teacher_scores: tuple[float, float] | None = None) -> dict:
    """Probe accuracy, split perplexities, coverage of both groups against ``teacher`` and memory.

    ``teacher_scores`` = (probe accuracy, filler token score) of the teacher, if already known.
    """
    acc = eval_probe_accuracy(model, sets.probe)
    ppl = eval_perplexity(model, sets.ppl)
    spec = memory_spec_for(model.cfg, model.layout)
    row = {"model": name, "probe_acc": acc, "ppl_overall": ppl.overall, "ppl_retrieval": ppl.retrieval,
           "ppl_filler": ppl.filler, "coverage_retrieval": None, "coverage_knowledge": None,
           "n_attention": model.layout.n_attention, "state_bytes": spec.state_bytes,
           "kv_bytes_per_token": spec.kv_bytes_per_token,
           "memory_bytes": memory_footprint(spec, run.eval["memory_L"]).bytes}
    if teacher is not None and teacher_scores is None:
        teacher_scores = (eval_probe_accuracy(teacher, sets.probe),
                          eval_perplexity(teacher, sets.ppl).filler_token_score)
    if teacher_scores is not None:
        for key, mine, ref in (("coverage_retrieval", acc, teacher_scores[0]),
                               ("coverage_knowledge", ppl.filler_token_score, teacher_scores[1])):
            try:
                row[key] = coverage([TaskScore(key, mine)], [TaskScore(key, ref)])
            except ZeroDivisionError:
                row[key] = None  # teacher scores 0: coverage undefined, left blank
    return row


# --- sweeps -------------------------------------------------------------------------

SWEEP_K_COLUMNS = ("k", "seed", "strategy", "n_attention", "status", "probe_acc", "ppl_retrieval", "ppl_filler",
                   "memory_bytes")


def _job(args):
    fn, kwargs = args
    torch.set_num_threads(1)
    return fn(**kwargs)


def run_jobs(fn: Callable, jobs: Sequence[dict], n_workers: int = 1) -> list:
    """Apply ``fn`` to each kwargs dict; results come back in submission order regardless of workers."""
    if n_workers <= 1:
        return [fn(**kw) for kw in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_job, [(fn, kw) for kw in jobs]))


def _placement_point(run: RunConfig, teacher: HybridLM, importance: ImportanceTable | None, strategy: str,
                     k: int, seed: int, stride: int | None = None, offset: int | None = None) -> dict:
    sets = eval_sets(run)
    spec = layout_for(run, importance, strategy, budget=k, seed=seed, stride=stride, offset=offset)
    row = {"k": k, "seed": seed, "strategy": strategy, "n_attention": spec.layout.n_attention, "status": "ok",
           "probe_acc": None, "ppl_retrieval": None, "ppl_filler": None,
           "memory_bytes": memory_footprint(memory_spec_for(run.model, spec.layout, d_state=run.student_d_state),
                                            run.eval["memory_L"]).bytes}
    try:
        if strategy == "annealed":
            student, _ = distill_annealed(run, teacher, spec.schedule, seed, sets)
        else:
            student, _ = distill_student(run, teacher, spec.layout, seed, sets)
        ppl = eval_perplexity(student, sets.ppl)
        row.update(probe_acc=eval_probe_accuracy(student, sets.probe), ppl_retrieval=ppl.retrieval,
                   ppl_filler=ppl.filler)
    except (ConvergenceError, FloatingPointError) as exc:
        row["status"] = f"failed: {exc}"
    return row


def k_sweep(run: RunConfig, teacher: HybridLM, importance: ImportanceTable, ks: Sequence[int],
            seeds: Sequence[int], n_workers: int = 1) -> list[dict]:
    jobs = [dict(run=run, teacher=teacher, importance=importance, strategy="retrieval_aware", k=k, seed=s)
            for k in ks for s in seeds]
    return run_jobs(_placement_point, jobs, n_workers)


def placement_sweep(run: RunConfig, teacher: HybridLM, importance: ImportanceTable, budget: int,
                    seeds: Sequence[int], strategies: Sequence[str], strides: Sequence[int] = (2,),
                    n_workers: int = 1) -> list[dict]:
    """Retrieval-aware and random at ``budget`` heads; fixed interleaving at each stride (all offsets 0)."""
    jobs = []
    for strategy in strategies:
        if strategy == "fixed_interleave":
            for stride in strides:
                k = len(range(0, run.model.n_layers, stride)) * run.model.n_heads
                jobs += [dict(run=run, teacher=teacher, importance=importance, strategy=strategy, k=k, seed=s,
                              stride=stride, offset=0) for s in seeds]
        else:
            jobs += [dict(run=run, teacher=teacher, importance=importance, strategy=strategy, k=budget, seed=s)
                     for s in seeds]
    return run_jobs(_placement_point, jobs, n_workers)


def localization(student: HybridLM, sets: EvalSets, top: int = 10) -> dict:
    """How many of the ``top`` most ablation-sensitive student heads are retained attention heads."""
    table = score_all_heads(student, sets.probe)
    heads = table.top(top)
    n_att = sum(r.head_kind == "attention" for r in heads)
    return {"table": table, "top": heads, "attention_in_top": n_att,
            "attention_fraction": student.layout.n_attention / student.cfg.total_heads}


# --- a teacher with memoised students ---------------------------------------------


class Lab:
    """One trained teacher, its head importance and memoised distilled students.

    With ``cache`` set, the teacher and each student are checkpointed under
    ``cache/<config fingerprint>/`` and reloaded on the next run; every artifact is a pure
    function of the config, so a cache hit is the same model a fresh run would produce.
    """

    def __init__(self, run: RunConfig, cache: str | None = None):
        self.run = run
        self.sets = eval_sets(run)
        self.cache = None
        if cache is not None:
            self.cache = Path(cache) / config_fingerprint(run)
        self.teacher_seconds: float | None = None  # wall time of a fresh teacher run
        self.teacher_trace: MetricsTrace | None = None
        self.teacher_converged: bool | None = None
        self._teacher: HybridLM | None = None
        self._importance: ImportanceTable | None = None
        self._teacher_eval: dict | None = None
        self._teacher_scores: tuple[float, float] | None = None
        self._students: dict[tuple, tuple[HybridLM, dict]] = {}
        self.student_seconds: dict[tuple, float] = {}

    @property
    def teacher(self) -> HybridLM:
        if self._teacher is None:
            path = self.cache / "teacher" if self.cache else None
            if path is not None and (path / "manifest.json").exists():
                self._teacher, manifest = load_checkpoint(path)
                self.teacher_converged = manifest["provenance"]["extra"]["converged"]
            else:
                t0 = time.perf_counter()
                self._teacher, self.teacher_trace, self.teacher_converged = run_teacher(self.run, self.sets)
                self.teacher_seconds = time.perf_counter() - t0
                if path is not None:
                    save_checkpoint(self._teacher, path, Provenance(
                        "teacher", self.run.teacher.total_steps, self.run.seed,
                        extra={"converged": self.teacher_converged}))
        return self._teacher

    @property
    def importance(self) -> ImportanceTable:
        if self._importance is None:
            self._importance = score_heads(self.teacher, self.sets)
        return self._importance

    @property
    def teacher_eval(self) -> dict:
        """Evaluation row of the teacher (no coverage columns)."""
        if self._teacher_eval is None:
            self._teacher_eval = evaluate(self.run, self.teacher, self.sets, name="teacher")
            self._teacher_scores = (self._teacher_eval["probe_acc"],
                                    eval_perplexity(self.teacher, self.sets.ppl).filler_token_score)
        return self._teacher_eval

    def student(self, strategy: str, k: int, seed: int, d_state: int | None = None,
                stride: int | None = None) -> tuple[HybridLM, dict]:
        """(student, evaluation row) for one placement; ``k`` is ignored by fixed_interleave."""
        key = (strategy, k, seed, d_state, stride)
        if key not in self._students:
            name = "-".join(str(x) for x in key)
            path = self.cache / "students" / name if self.cache else None
            if path is not None and (path / "manifest.json").exists():
                model, _ = load_checkpoint(path)
            else:
                importance = self.importance if strategy == "retrieval_aware" else None
                spec = layout_for(self.run, importance, strategy, budget=k, seed=seed, stride=stride, offset=0)
                t0 = time.perf_counter()
                if strategy == "annealed":
                    model, _ = distill_annealed(self.run, self.teacher, spec.schedule, seed, self.sets)
                else:
                    model, _ = distill_student(self.run, self.teacher, spec.layout, seed, self.sets, d_state=d_state)
                self.student_seconds[key] = time.perf_counter() - t0
                if path is not None:
                    save_checkpoint(model, path, Provenance(self.run.plan.stages[-1].name, self.run.plan.total_steps,
                                                            seed, extra={"key": name}))
            self.teacher_eval  # noqa: B018 - fills the cached teacher scores
            row = evaluate(self.run, model, self.sets, name=f"{strategy}-k{model.layout.n_attention}",
                           teacher_scores=self._teacher_scores)
            row["seed"] = seed
            self._students[key] = (model, row)
        return self._students[key]


def config_fingerprint(run: RunConfig) -> str:
    """Short digest of every config value (run.out excluded) and the package version."""
    from . import __version__

    values = {sec: dict(v) for sec, v in run.raw.items()}
    values["run"].pop("out", None)
    text = json.dumps(values, sort_keys=True, default=str) + __version__
    return hashlib.sha256(text.encode()).hexdigest()[:16]
