"""Teacher training and the three-stage distillation pipeline (orientation, alignment, KD)."""

from __future__ import annotations

import contextlib
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .ablation import probe_accuracy
from .model import HybridLM, HybridLayer, HybridLayout, ModelConfig, build_student, materialize_mixer
from .taskgen import IGNORE, Kind, SequenceBatch, TaskParams, gen_mixture, gen_probe, stack

log = logging.getLogger(__name__)

STAGES = ("orientation", "alignment", "kd")


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, trace: "MetricsTrace"):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 1000
    batch_size: int = 32
    peak_lr: float = 1e-3
    min_lr: float = 1e-8
    warmup_frac: float = 0.1
    decay_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    seed: int = 0
    log_every: int = 10
    eval_every: int = 100
    mixture_ratio: float = 0.5
    dtype: str = "float64"  # compute dtype while training; returned models are always float64

    def __post_init__(self):
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.warmup_frac + self.decay_frac > 1:
            raise ValueError("warmup_frac + decay_frac must be <= 1")
        if self.peak_lr <= self.min_lr:
            raise ValueError("peak_lr must exceed min_lr")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**self.__dict__, **kw})


@contextlib.contextmanager
def compute_dtype(name: str):
    """Temporarily make ``name`` the default floating dtype (model construction, scratch tensors)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(getattr(torch, name))
    try:
        yield getattr(torch, name)
    finally:
        torch.set_default_dtype(previous)


def lr_at_step(cfg: TrainConfig, step: int) -> float:
    """Warm-Stable-Decay: linear 0→peak, flat peak, linear peak→min_lr over the last stretch."""
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    return wsd_lr(cfg, float(step))


def wsd_phases(cfg: TrainConfig) -> tuple[int, int]:
    """(first stable step, first decay step)."""
    n_warm = int(round(cfg.warmup_frac * cfg.total_steps))
    n_decay = int(round(cfg.decay_frac * cfg.total_steps))
    return n_warm, cfg.total_steps - n_decay


def wsd_lr(cfg: TrainConfig, t: float) -> float:
    """The schedule as a piecewise-linear function of continuous time ``t``."""
    n_warm, decay_start = wsd_phases(cfg)
    if t < n_warm:
        return cfg.peak_lr * t / n_warm
    if t < decay_start:
        return cfg.peak_lr
    frac = (t - decay_start) / (cfg.total_steps - decay_start)
    return cfg.peak_lr + (cfg.min_lr - cfg.peak_lr) * frac


@dataclass(frozen=True)
class Stage:
    name: str
    steps: int
    peak_lr: float

    def __post_init__(self):
        if self.name not in STAGES:
            raise ValueError(f"unknown stage {self.name!r}")


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        order = [STAGES.index(s.name) for s in self.stages]
        if order != sorted(order) or len(set(order)) != len(order):
            raise ValueError("stages must run orientation -> alignment -> kd, each at most once")

    @classmethod
    def default(cls, align_steps=300, kd_steps=600, align_lr=3e-3, kd_lr=1e-3, orient_steps=0, orient_lr=3e-3):
        stages = []
        if orient_steps:
            stages.append(Stage("orientation", orient_steps, orient_lr))
        if align_steps:
            stages.append(Stage("alignment", align_steps, align_lr))
        if kd_steps:
            stages.append(Stage("kd", kd_steps, kd_lr))
        return cls(tuple(stages))

    @property
    def total_steps(self) -> int:
        return sum(s.steps for s in self.stages)


# --- metrics trace ------------------------------------------------------------

TRACE_COLUMNS = ("step", "stage", "loss", "lr", "probe_acc", "ppl")


@dataclass
class MetricsTrace:
    rows: list[dict] = field(default_factory=list)

    def log(self, step, stage, loss, lr, probe_acc=None, ppl=None) -> None:
        self.rows.append(dict(step=step, stage=stage, loss=loss, lr=lr, probe_acc=probe_acc, ppl=ppl))

    def __len__(self) -> int:
        return len(self.rows)

    def last(self, key: str):
        for row in reversed(self.rows):
            if row[key] is not None:
                return row[key]
        return None


# --- losses ---------------------------------------------------------------------


def lm_loss(logits: torch.Tensor, labels: torch.Tensor, per_row: bool = False) -> torch.Tensor:
    """Next-token cross-entropy over non-ignored positions.

    ``per_row`` averages within each row first and then across rows, so a row with one
    supervised token weighs as much as a row with fifty.
    """
    if not per_row:
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE)
    nll = F.cross_entropy(logits.transpose(1, 2), labels.clamp(min=0), reduction="none")
    mask = (labels != IGNORE).to(nll.dtype)
    count = mask.sum(1)
    row = (nll * mask).sum(1) / count.clamp(min=1)
    return row[count > 0].mean()


def kd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy of the student against the teacher's soft targets (temperature 1)."""
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"shape mismatch {tuple(teacher_logits.shape)} vs {tuple(student_logits.shape)}")
    p = torch.softmax(teacher_logits, dim=-1)
    ce = -(p * torch.log_softmax(student_logits, dim=-1)).sum(-1)
    if mask is None:
        return ce.mean()
    mask = mask.to(ce.dtype)
    return (ce * mask).sum() / mask.sum()


def orientation_loss(teacher_layer: HybridLayer, student_layer: HybridLayer, u: torch.Tensor) -> torch.Tensor:
    """Frobenius distance between teacher and student per-slot mixing matrices, batch-averaged.

    ``u`` is the teacher's residual input to this layer, [B, T, d_model].
    """
    h_t, h_s = teacher_layer.ln1(u), student_layer.ln1(u)
    B_, T, _ = u.shape
    dh = teacher_layer.cfg.d_head
    total = u.new_zeros(())
    for slot in range(teacher_layer.cfg.n_heads):
        m_t = materialize_mixer(teacher_layer.attention_head(slot), h_t).M
        if slot in student_layer.attn_slots:
            m_s = materialize_mixer(student_layer.attention_head(slot), h_s).M
        else:
            chunk = h_s[..., slot * dh:(slot + 1) * dh]
            m_s = materialize_mixer(student_layer.ssm_head(slot), chunk).M
        total = total + torch.linalg.matrix_norm(m_t - m_s).mean()
    return total


def alignment_loss(teacher_layer: HybridLayer, student_layer: HybridLayer, u: torch.Tensor,
                   mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared L2 distance between teacher and student block outputs on teacher input ``u``."""
    with torch.no_grad():
        target = teacher_layer(u)
    sq = ((student_layer(u) - target) ** 2).sum(-1)
    if mask is None:
        return sq.mean()
    mask = mask.to(sq.dtype)
    return (sq * mask).sum() / mask.sum()


# --- optimisation plumbing ------------------------------------------------------

_DECAY_NAMES = ("Wq", "Wk", "Wv", "W_a", "W_B", "W_C", "weight")


def _wants_decay(name: str, p: torch.nn.Parameter) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    if name.startswith(("ln", "tok_emb", "pos_emb")) or ".ln" in name:
        return False
    return leaf in _DECAY_NAMES and p.ndim >= 2


def make_optimizer(model: HybridLM, params: Sequence[torch.nn.Parameter], cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with decoupled decay on matrix weights only; ``params`` selects what trains."""
    chosen = {id(p) for p in params}
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if id(p) not in chosen:
            continue
        (decay if _wants_decay(name, p) else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW([g for g in groups if g["params"]], lr=0.0,
                             betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


def _set_lr(opt, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _batch_tensors(batch: SequenceBatch, answer_only_kv: bool = False):
    tokens = torch.as_tensor(batch.tokens)
    labels = batch.labels()
    if answer_only_kv:
        kv = np.array([k == Kind.KV_RETRIEVAL for k in batch.kind])
        labels[kv] = batch.answer_only_labels()[kv]
    return tokens, torch.as_tensor(labels)


def mixture_batch(seed: int, step: int, cfg: TrainConfig, task: TaskParams) -> SequenceBatch:
    return stack(gen_mixture(hash_seed(seed, step), cfg.batch_size, cfg.mixture_ratio, task))


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class EvalHooks:
    """Periodic evaluation: probe accuracy and perplexity on fixed held-out sets."""

    probe: SequenceBatch
    ppl_batch: SequenceBatch | None = None

    def __call__(self, model: HybridLM) -> tuple[float, float | None]:
        model.eval()
        acc = probe_accuracy(model, self.probe)
        ppl = None
        if self.ppl_batch is not None:
            from .evalkit import eval_perplexity

            ppl = eval_perplexity(model, self.ppl_batch).overall
        return acc, ppl


def default_hooks(task: TaskParams, seed: int, probe_size: int = 256) -> EvalHooks:
    probe = gen_probe(hash_seed(seed, 0xE7A1), probe_size, task)
    ppl = stack(gen_mixture(hash_seed(seed, 0xE7A2), 64, 0.5, task))
    return EvalHooks(probe, ppl)


# --- teacher ---------------------------------------------------------------------


@dataclass(frozen=True)
class TeacherTarget:
    probe_accuracy: float = 0.95


def train_teacher(model_cfg: ModelConfig, cfg: TrainConfig, task: TaskParams,
                  hooks: EvalHooks | None = None, target: TeacherTarget = TeacherTarget(),
                  answer_only_kv: bool = True, raise_on_failure: bool = False):
    """Train an all-attention LM on the retrieval/filler mixture.

    Returns ``(model, trace, converged)``; ``converged`` means the final probe accuracy
    reached ``target.probe_accuracy``.
    """
    with compute_dtype(cfg.dtype):
        model, trace, converged = _train_teacher(model_cfg, cfg, task, hooks, target, answer_only_kv)
    model.double().eval()
    if not converged and raise_on_failure:
        raise ConvergenceError(f"teacher probe accuracy {trace.last('probe_acc')} below {target.probe_accuracy}",
                               trace)
    return model, trace, converged


def _train_teacher(model_cfg, cfg, task, hooks, target, answer_only_kv):
    torch.manual_seed(cfg.seed)
    model = HybridLM(model_cfg, seed=cfg.seed)
    hooks = hooks or default_hooks(task, cfg.seed)
    opt = make_optimizer(model, list(model.parameters()), cfg)
    trace = MetricsTrace()
    for step in range(cfg.total_steps):
        model.train()
        lr = lr_at_step(cfg, step)
        _set_lr(opt, lr)
        tokens, labels = _batch_tensors(mixture_batch(cfg.seed, step, cfg, task), answer_only_kv)
        loss = lm_loss(model(tokens), labels, per_row=answer_only_kv)
        if not torch.isfinite(loss):
            raise ConvergenceError(f"teacher loss became non-finite at step {step}", trace)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        _maybe_log(trace, model, hooks, cfg, step, "teacher", loss.item(), lr)
    acc = trace.last("probe_acc")
    return model, trace, acc is not None and acc >= target.probe_accuracy


def _maybe_log(trace, model, hooks, cfg, step, stage, loss, lr, offset=0, last=None):
    global_step = offset + step
    is_last = step == (cfg.total_steps - 1 if last is None else last)
    # a row closes each logging interval, so a run logs total_steps / log_every rows
    if (global_step + 1) % cfg.log_every and not is_last:
        return
    acc = ppl = None
    if hooks is not None and ((global_step + 1) % cfg.eval_every == 0 or is_last):
        acc, ppl = hooks(model)
    trace.log(global_step, stage, loss, lr, acc, ppl)


# --- distillation pipeline -------------------------------------------------------


def trainable_params(student: HybridLM, stage: str) -> list[torch.nn.Parameter]:
    """Orientation trains SSM heads; alignment adds the output projection of layers that hold
    SSM heads; KD trains everything. Retained attention heads stay frozen until KD."""
    if stage == "kd":
        return list(student.parameters())
    params = []
    for layer in student.layers:
        params += layer.ssm_params()
        if stage == "alignment" and layer.ssm_slots:
            params += list(layer.out_proj.parameters())
    return params


def _stage_loss(stage, teacher, student, tokens, labels):
    if stage == "kd":
        with torch.no_grad():
            t_logits = teacher(tokens)
        return kd_loss(t_logits, student(tokens), labels != IGNORE)
    with torch.no_grad():
        _, hidden = teacher(tokens, return_hidden=True)
    mask = labels != IGNORE
    total = hidden[0].new_zeros(())
    for i, (t_layer, s_layer) in enumerate(zip(teacher.layers, student.layers)):
        if not s_layer.ssm_slots:
            continue
        if stage == "alignment":
            total = total + alignment_loss(t_layer, s_layer, hidden[i], mask)
        else:
            total = total + orientation_loss(t_layer, s_layer, hidden[i])
    return total


def run_pipeline(teacher: HybridLM, layout: HybridLayout, plan: StagePlan, cfg: TrainConfig,
                 task: TaskParams, hooks: EvalHooks | None = None, d_state: int | None = None,
                 student: HybridLM | None = None):
    """Build (or continue) a hybrid student from ``teacher`` and run ``plan``'s stages in order.

    Returns ``(student, trace)``. Each stage gets its own WSD schedule over its step budget.
    """
    with compute_dtype(cfg.dtype) as dtype:
        if teacher.tok_emb.dtype != dtype:
            teacher = copy.deepcopy(teacher).to(dtype)
        if student is not None and student.tok_emb.dtype != dtype:
            student = copy.deepcopy(student).to(dtype)
        student, trace = _run_pipeline(teacher, layout, plan, cfg, task, hooks, d_state, student)
    return student.double(), trace


def _run_pipeline(teacher, layout, plan, cfg, task, hooks, d_state, student):
    torch.manual_seed(cfg.seed)
    teacher.eval()
    if student is None:
        student = build_student(teacher, layout, seed=hash_seed(cfg.seed, 0x55D), d_state=d_state)
    hooks = hooks or default_hooks(task, cfg.seed)
    trace = MetricsTrace()
    offset = 0
    for stage in plan.stages:
        stage_cfg = cfg.replace(total_steps=stage.steps, peak_lr=stage.peak_lr)
        params = trainable_params(student, stage.name)
        for p in student.parameters():
            p.requires_grad_(False)
        for p in params:
            p.requires_grad_(True)
        if not params:
            offset += stage.steps
            continue
        opt = make_optimizer(student, params, stage_cfg)
        for step in range(stage.steps):
            student.train()
            lr = lr_at_step(stage_cfg, step)
            _set_lr(opt, lr)
            batch = mixture_batch(hash_seed(cfg.seed, STAGES.index(stage.name)), step, cfg, task)
            tokens, labels = _batch_tensors(batch)
            loss = _stage_loss(stage.name, teacher, student, tokens, labels)
            if not torch.isfinite(loss):
                raise ConvergenceError(f"{stage.name} loss became non-finite at step {offset + step}", trace)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            _maybe_log(trace, student, hooks, cfg, step, stage.name, loss.item(), lr, offset,
                       last=stage.steps - 1)
        offset += stage.steps
    for p in student.parameters():
        p.requires_grad_(True)
    student.eval()
    return student, trace
