"""Evaluation metrics, placement baselines, the state-size sweep and the analytical memory model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .ablation import ImportanceTable, probe_accuracy
from .model import HybridLayout, ModelConfig
from .taskgen import IGNORE, Kind, SequenceBatch

# --- scores -----------------------------------------------------------------------


@dataclass(frozen=True)
class TaskScore:
    task: str
    accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


def coverage(model_scores: Sequence[TaskScore], teacher_scores: Sequence[TaskScore]) -> float:
    """100 × mean(model) / mean(teacher) over the same task ids; may exceed 100."""
    m = {s.task: s.accuracy for s in model_scores}
    t = {s.task: s.accuracy for s in teacher_scores}
    if set(m) != set(t) or not t:
        raise ValueError(f"task ids differ: {sorted(m)} vs {sorted(t)}")
    keys = sorted(t)
    t_mean = float(np.mean([t[k] for k in keys]))
    if t_mean == 0:
        raise ZeroDivisionError("teacher mean score is 0; coverage undefined")
    return 100.0 * (float(np.mean([m[k] for k in keys])) / t_mean)


def eval_probe_accuracy(model, probe: SequenceBatch) -> float:
    if len(probe) == 0:
        raise ValueError("empty probe")
    if any(k != Kind.KV_RETRIEVAL for k in probe.kind):
        raise ValueError("probe rows must be kv_retrieval")
    return probe_accuracy(model, probe)


@dataclass(frozen=True)
class Perplexity:
    overall: float
    retrieval: float | None  # answer tokens of kv_retrieval rows
    filler: float | None  # every scored token of filler rows
    filler_token_score: float | None  # mean exp(-NLL) over filler tokens


def token_nll(model, batch: SequenceBatch, batch_size: int = 256) -> np.ndarray:
    """Per-position next-token NLL [B, T]; unscored positions are NaN."""
    tokens = torch.as_tensor(batch.tokens)
    labels = torch.as_tensor(batch.labels())
    out = []
    with torch.no_grad():
        for i in range(0, len(batch), batch_size):
            logits = model(tokens[i:i + batch_size])
            lab = labels[i:i + batch_size]
            nll = F.cross_entropy(logits.transpose(1, 2), lab.clamp(min=0), reduction="none")
            out.append(torch.where(lab == IGNORE, torch.full_like(nll, float("nan")), nll))
    return torch.cat(out).numpy()


def eval_perplexity(model, batch: SequenceBatch) -> Perplexity:
    nll = token_nll(model, batch)
    kinds = np.array([k.value for k in batch.kind])
    overall = float(np.exp(np.nanmean(nll)))
    kv = kinds == Kind.KV_RETRIEVAL.value
    fill = kinds == Kind.FILLER.value
    retrieval = filler = score = None
    if kv.any():
        ans = nll[np.nonzero(kv)[0], batch.answer_pos[kv]]
        retrieval = float(np.exp(ans.mean()))
    if fill.any():
        f = nll[fill]
        f = f[~np.isnan(f)]
        filler = float(np.exp(f.mean()))
        score = float(np.exp(-f).mean())
    return Perplexity(overall, retrieval, filler, score)


def group_scores(model, probes: dict[str, SequenceBatch], filler: SequenceBatch) -> dict[str, list[TaskScore]]:
    """Retrieval group: probe accuracy per probe set. Knowledge group: filler exp(-NLL) per token."""
    retrieval = [TaskScore(name, eval_probe_accuracy(model, p)) for name, p in sorted(probes.items())]
    knowledge = [TaskScore("filler", eval_perplexity(model, filler).filler_token_score)]
    return {"retrieval": retrieval, "knowledge": knowledge}


# --- memory model -----------------------------------------------------------------


@dataclass(frozen=True)
class MemorySpec:
    name: str
    n_ssm: int  # SSM heads summed over layers
    d_state: int
    n_kv: int  # KV heads per the model's accounting (already GQA-reduced)
    d_head: int = 64
    bytes_per_elem: int = 2

    def __post_init__(self):
        if min(self.n_ssm, self.d_state, self.n_kv, self.d_head, self.bytes_per_elem) < 0:
            raise ValueError("memory spec fields must be nonnegative")

    @classmethod
    def from_gqa(cls, name: str, n_ssm: int, d_state: int, n_attn: int, group: int, **kw) -> "MemorySpec":
        if group < 1 or n_attn % group:
            raise ValueError(f"n_attn={n_attn} is not divisible by group size {group}")
        return cls(name, n_ssm, d_state, n_attn // group, **kw)

    @property
    def state_bytes(self) -> int:
        return self.n_ssm * self.d_head * self.d_state * self.bytes_per_elem

    @property
    def kv_bytes_per_token(self) -> int:
        return self.n_kv * self.d_head * 2 * self.bytes_per_elem


@dataclass(frozen=True)
class Footprint:
    bytes: int

    @property
    def kib(self) -> float:
        return self.bytes / 1024

    @property
    def mb(self) -> float:
        return self.bytes / 1e6

    def mb_str(self) -> str:
        return f"{self.mb:.1f} MB"


def memory_footprint(spec: MemorySpec, L: int) -> Footprint:
    """Constant SSM state plus a KV cache that grows linearly in ``L`` tokens."""
    if L < 0:
        raise ValueError("L must be >= 0")
    return Footprint(spec.state_bytes + spec.kv_bytes_per_token * L)


# the four Llama-3.2-1B-matched configurations (heads summed over layers, d_head 64, bf16)
REFERENCE_SPECS = (
    MemorySpec("retrieval-aware", n_ssm=492, d_state=8, n_kv=10),
    MemorySpec("layer-wise-25", n_ssm=384, d_state=64, n_kv=32),
    MemorySpec("layer-wise-50", n_ssm=256, d_state=64, n_kv=64),
    MemorySpec("llama-3.2-1b", n_ssm=0, d_state=0, n_kv=128),
)


def memory_spec_for(cfg: ModelConfig, layout: HybridLayout, bytes_per_elem: int = 2,
                    d_state: int | None = None) -> MemorySpec:
    n_attn = layout.n_attention
    return MemorySpec(
        f"toy-k{n_attn}",
        n_ssm=cfg.total_heads - n_attn,
        d_state=cfg.state_dim if d_state is None else d_state,
        n_kv=n_attn,
        d_head=cfg.d_head,
        bytes_per_elem=bytes_per_elem,
    )


def memory_table(specs: Iterable[MemorySpec], lengths: Sequence[int]) -> list[dict]:
    rows = []
    for spec in specs:
        row = {"model": spec.name, "state_bytes": spec.state_bytes, "kv_bytes_per_token": spec.kv_bytes_per_token}
        for L in lengths:
            row[f"L{L}_bytes"] = memory_footprint(spec, L).bytes
            row[f"L{L}_MB"] = round(memory_footprint(spec, L).mb, 1)
        rows.append(row)
    return rows


# --- placements ------------------------------------------------------------------

PLACEMENT_STRATEGIES = ("retrieval_aware", "fixed_interleave", "annealed", "random")


@dataclass(frozen=True)
class PlacementSpec:
    strategy: str
    layout: HybridLayout
    schedule: tuple[HybridLayout, ...] = ()  # annealed only: successive stage layouts
    params: dict = field(default_factory=dict)


def make_placement(strategy: str, cfg: ModelConfig, importance: ImportanceTable | None = None,
                   budget: int = 0, *, stride: int = 1, offset: int = 0, seed: int = 0,
                   fractions: Sequence[float] = (0.5, 0.25, 0.125),
                   layer_order: Sequence[int] | None = None) -> PlacementSpec:
    """Which heads stay attention.

    - ``retrieval_aware``: the ``budget`` most important heads of ``importance``.
    - ``fixed_interleave``: all heads of layers ``offset, offset+stride, ...``.
    - ``annealed``: keep shrinking fractions of whole layers; ``layout`` is the final stage.
    - ``random``: ``budget`` heads drawn uniformly without replacement by ``seed``.
    """
    total = cfg.total_heads
    if strategy == "retrieval_aware":
        if importance is None:
            raise ValueError("retrieval_aware placement needs an importance table")
        if not 0 <= budget <= total:
            raise ValueError(f"budget {budget} outside [0, {total}]")
        return PlacementSpec(strategy, HybridLayout.from_heads(cfg, importance.top_heads(budget)),
                             params={"budget": budget})
    if strategy == "fixed_interleave":
        if stride < 1 or not 0 <= offset < cfg.n_layers:
            raise ValueError("fixed_interleave needs stride >= 1 and 0 <= offset < n_layers")
        layers = list(range(offset, cfg.n_layers, stride))
        return PlacementSpec(strategy, HybridLayout.from_layers(cfg, layers), params={"stride": stride, "offset": offset})
    if strategy == "annealed":
        order = list(layer_order) if layer_order is not None else _spread_order(cfg.n_layers)
        stages = []
        for frac in fractions:
            n = max(0, int(round(frac * cfg.n_layers)))
            stages.append(HybridLayout.from_layers(cfg, order[:n]))
        return PlacementSpec(strategy, stages[-1], tuple(stages), params={"fractions": tuple(fractions)})
    if strategy == "random":
        if not 0 <= budget <= total:
            raise ValueError(f"budget {budget} outside [0, {total}]")
        rng = np.random.default_rng([seed, 0x2A2D])
        picks = rng.permutation(total)[:budget]
        heads = [(int(i) // cfg.n_heads, int(i) % cfg.n_heads) for i in picks]
        return PlacementSpec(strategy, HybridLayout.from_heads(cfg, heads), params={"budget": budget, "seed": seed})
    raise ValueError(f"unknown placement strategy {strategy!r}; expected one of {PLACEMENT_STRATEGIES}")


def _spread_order(n_layers: int) -> list[int]:
    """Layers ordered so every prefix is spread evenly over depth (0, n/2, n/4, 3n/4, ...)."""
    order, seen = [], set()
    step = n_layers
    while len(order) < n_layers:
        for i in range(0, n_layers, max(step, 1)):
            if i not in seen:
                seen.add(i)
                order.append(i)
        step //= 2
        if step == 0:
            for i in range(n_layers):
                if i not in seen:
                    seen.add(i)
                    order.append(i)
    return order


# --- state-size sweep ---------------------------------------------------------------

SWEEP_COLUMNS = ("d_state", "status", "probe_acc", "ppl_retrieval", "ppl_filler", "memory_bytes")


def sweep_state_size(teacher, layout: HybridLayout, d_states: Sequence[int], plan, cfg, task,
                     probe: SequenceBatch, ppl_batch: SequenceBatch, memory_L: int | None = None,
                     hooks=None) -> list[dict]:
    """Distill one student per ``d_state`` with the retained heads fixed to ``layout``.

    A run that fails (divergence, numerical blow-up) becomes a row with ``status`` set to
    the error and empty metrics; the sweep carries on with the next value.
    """
    from .distill import ConvergenceError, run_pipeline

    if any(int(n) < 1 for n in d_states):
        raise ValueError(f"d_state values must be positive, got {list(d_states)}")
    L = teacher.cfg.max_T if memory_L is None else memory_L
    rows = []
    for n in d_states:
        mem = memory_footprint(memory_spec_for(teacher.cfg, layout, d_state=int(n)), L).bytes
        row = {"d_state": int(n), "status": "ok", "probe_acc": None, "ppl_retrieval": None,
               "ppl_filler": None, "memory_bytes": mem}
        try:
            student, _ = run_pipeline(teacher, layout, plan, cfg, task, hooks=hooks, d_state=int(n))
            ppl = eval_perplexity(student, ppl_batch)
            row.update(probe_acc=eval_probe_accuracy(student, probe), ppl_retrieval=ppl.retrieval,
                       ppl_filler=ppl.filler)
        except (ConvergenceError, FloatingPointError) as exc:
            row["status"] = f"failed: {exc}"
        rows.append(row)
    return rows
