import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_distill.distill import (
    ConvergenceError,
    EvalHooks,
    Stage,
    StagePlan,
    TeacherTarget,
    TrainConfig,
    alignment_loss,
    kd_loss,
    lm_loss,
    lr_at_step,
    make_optimizer,
    orientation_loss,
    run_pipeline,
    train_teacher,
    trainable_params,
    wsd_lr,
    wsd_phases,
)
from hybrid_distill.model import HybridLayout, HybridLM, ModelConfig, build_student, clone_model
from hybrid_distill.taskgen import IGNORE, TaskParams, gen_probe

CFG = ModelConfig(n_layers=2, n_heads=4, d_model=16, vocab_size=53, max_T=32)
TASK = TaskParams(min_pairs=2, max_pairs=5, seq_len=23)
TINY = TrainConfig(total_steps=6, batch_size=4, peak_lr=1e-3, log_every=2, eval_every=2)


def hooks():
    return EvalHooks(gen_probe(0, 16, TASK))


# --- schedule -----------------------------------------------------------------


def test_wsd_examples():
    cfg = TrainConfig(total_steps=1000, peak_lr=1e-4)
    assert lr_at_step(cfg, 500) == 1e-4
    assert lr_at_step(cfg, 50) == pytest.approx(5e-5, rel=1e-12)
    # midpoint between 1e-4 and 1e-8
    assert lr_at_step(cfg, 950) == pytest.approx(5.0005e-5, rel=1e-12)
    assert lr_at_step(cfg, 0) == 0.0
    assert lr_at_step(cfg, 999) == pytest.approx(1e-4 + (1e-8 - 1e-4) * 99 / 100, rel=1e-12)


def test_wsd_out_of_range():
    cfg = TrainConfig(total_steps=10)
    for bad in (-1, 10):
        with pytest.raises(ValueError):
            lr_at_step(cfg, bad)


@given(st.integers(10, 100_000), st.floats(1e-6, 1.0))
def test_wsd_continuous_at_phase_boundaries(total, peak):
    cfg = TrainConfig(total_steps=total, peak_lr=max(peak, 1e-7))
    for b in wsd_phases(cfg):
        left, right = wsd_lr(cfg, b - 1e-9), wsd_lr(cfg, float(b))
        assert abs(left - right) < 1e-12 * cfg.peak_lr + abs(cfg.peak_lr) * 1e-9 / max(b, 1)


def test_wsd_final_value_reaches_min():
    cfg = TrainConfig(total_steps=100, peak_lr=1e-3)
    assert wsd_lr(cfg, 100.0) == pytest.approx(1e-8, rel=1e-9)


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(warmup_frac=0.6, decay_frac=0.5)
    with pytest.raises(ValueError):
        TrainConfig(peak_lr=1e-9)


def test_stage_plan_order():
    StagePlan((Stage("orientation", 1, 1e-3), Stage("alignment", 1, 1e-3), Stage("kd", 1, 1e-3)))
    with pytest.raises(ValueError):
        StagePlan((Stage("kd", 1, 1e-3), Stage("alignment", 1, 1e-3)))
    with pytest.raises(ValueError):
        Stage("sft", 1, 1e-3)
    assert [s.name for s in StagePlan.default().stages] == ["alignment", "kd"]


# --- losses ---------------------------------------------------------------------


def test_kd_hand_value():
    t = torch.log(torch.tensor([[0.5, 0.5]]))
    s = torch.log(torch.tensor([[0.75, 0.25]]))
    expected = -(0.5 * math.log(0.75) + 0.5 * math.log(0.25))
    assert kd_loss(t, s).item() == pytest.approx(expected, abs=1e-15)
    assert round(expected, 4) == 0.8370


def test_kd_gradient_is_q_minus_p():
    g = torch.Generator().manual_seed(0)
    t = torch.randn(1, 7, generator=g)
    s = torch.randn(1, 7, generator=g, requires_grad=True)
    kd_loss(t, s).backward()
    q, p = torch.softmax(s.detach(), -1), torch.softmax(t, -1)
    assert torch.allclose(s.grad, q - p, atol=1e-15)
    eps = 1e-5
    for i in range(7):
        e = torch.zeros_like(s)
        e[0, i] = eps
        cd = (kd_loss(t, s.detach() + e) - kd_loss(t, s.detach() - e)).item() / (2 * eps)
        assert abs(cd - s.grad[0, i].item()) / (abs(cd) + abs(s.grad[0, i].item()) + 1e-12) < 1e-6


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_kd_is_bounded_below_by_teacher_entropy(seed):
    g = torch.Generator().manual_seed(seed)
    t, s = torch.randn(3, 5, generator=g) * 3, torch.randn(3, 5, generator=g) * 3
    p = torch.softmax(t, -1)
    entropy = -(p * torch.log_softmax(t, -1)).sum(-1).mean()
    assert kd_loss(t, s) >= entropy - 1e-12
    assert kd_loss(t, t).item() == pytest.approx(entropy.item(), abs=1e-12)


def test_kd_mask_and_shape_errors():
    t = torch.zeros(2, 3, 5)
    s = torch.randn(2, 3, 5, generator=torch.Generator().manual_seed(1))
    mask = torch.tensor([[True, False, False], [False, False, False]])
    assert kd_loss(t, s, mask).item() == pytest.approx(kd_loss(t[:1, :1], s[:1, :1]).item(), abs=1e-15)
    with pytest.raises(ValueError):
        kd_loss(t, s[:, :2])


def _layer_input(model, T=10, seed=0):
    tokens = torch.randint(0, 53, (3, T), generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        _, hidden = model(tokens, return_hidden=True)
    return hidden


def test_orientation_zero_for_copy_positive_for_ssm():
    teacher = HybridLM(CFG, seed=1)
    u = _layer_input(teacher)[0]
    twin = build_student(teacher, HybridLayout.full(CFG))
    assert orientation_loss(teacher.layers[0], twin.layers[0], u).item() == 0.0
    student = build_student(teacher, HybridLayout(((0,), ())), seed=2)
    assert orientation_loss(teacher.layers[0], student.layers[0], u).item() > 0


def test_alignment_zero_and_quadratic():
    teacher = HybridLM(CFG, seed=3)
    u = _layer_input(teacher)[1]
    assert alignment_loss(teacher.layers[1], clone_model(teacher).layers[1], u).item() == 0.0
    direction = torch.randn(CFG.d_model, CFG.d_model, generator=torch.Generator().manual_seed(3))

    def perturbed(eps):
        twin = clone_model(teacher)
        with torch.no_grad():
            twin.layers[1].out_proj.weight.add_(eps * direction)
        return alignment_loss(teacher.layers[1], twin.layers[1], u).item()

    l1, l2 = perturbed(1e-4), perturbed(2e-4)
    assert l2 / l1 == pytest.approx(4.0, rel=1e-4)


def test_orientation_decreases_on_one_layer_instance():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, max_T=12)
    teacher = HybridLM(cfg, seed=4)
    student = build_student(teacher, HybridLayout(((0,),)), seed=5)
    u = _layer_input(teacher, T=12, seed=4)[0]
    params = trainable_params(student, "orientation")
    opt = torch.optim.Adam(params, lr=3e-3)
    losses = []
    for _ in range(100):
        loss = orientation_loss(teacher.layers[0], student.layers[0], u)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-12)


# --- optimizer and trainable sets -------------------------------------------------


def test_weight_decay_groups():
    model = HybridLM(CFG, HybridLayout(((0,), ())))
    opt = make_optimizer(model, list(model.parameters()), TrainConfig())
    names = {id(p): n for n, p in model.named_parameters()}
    decayed = {names[id(p)] for g in opt.param_groups if g["weight_decay"] > 0 for p in g["params"]}
    assert "layers.0.Wq" in decayed and "layers.0.W_B" in decayed and "layers.0.fc1.weight" in decayed
    for n in ("tok_emb", "pos_emb", "layers.0.ln1.weight", "layers.0.fc1.bias", "layers.0.b_a", "layers.0.D"):
        assert n not in decayed


def test_trainable_sets():
    student = build_student(HybridLM(CFG), HybridLayout(((0, 1), (0, 1, 2, 3))))
    ids = {id(p) for p in trainable_params(student, "alignment")}
    assert id(student.layers[0].W_a) in ids and id(student.layers[0].out_proj.weight) in ids
    assert id(student.layers[0].Wq) not in ids
    assert id(student.layers[1].out_proj.weight) not in ids  # no SSM heads there
    assert id(student.layers[0].out_proj.weight) not in {id(p) for p in trainable_params(student, "orientation")}
    assert len(trainable_params(student, "kd")) == len(list(student.parameters()))


# --- pipeline -----------------------------------------------------------------------


def test_retained_heads_frozen_through_alignment():
    teacher = HybridLM(CFG, seed=6)
    layout = HybridLayout(((1,), (0, 3)))
    plan = StagePlan((Stage("alignment", 4, 3e-3),))
    student, trace = run_pipeline(teacher, layout, plan, TINY, TASK, hooks())
    assert torch.equal(student.layers[0].Wq[0], teacher.layers[0].Wq[1])
    assert torch.equal(student.layers[1].Wv[1], teacher.layers[1].Wv[3])
    assert torch.equal(student.layers[0].fc1.weight, teacher.layers[0].fc1.weight)
    assert not torch.equal(student.layers[0].out_proj.weight, teacher.layers[0].out_proj.weight)
    assert [r["stage"] for r in trace.rows] == ["alignment"] * 2


def test_full_layout_kd_starts_at_entropy_floor():
    teacher = HybridLM(CFG, seed=7)
    plan = StagePlan((Stage("kd", 2, 1e-3),))
    cfg = TINY.replace(total_steps=2, log_every=1)
    student, trace = run_pipeline(teacher, HybridLayout.full(CFG), plan, cfg, TASK, hooks())
    from hybrid_distill.distill import _batch_tensors, hash_seed, mixture_batch, STAGES
    tokens, labels = _batch_tensors(mixture_batch(hash_seed(cfg.seed, STAGES.index("kd")), 0, cfg, TASK))
    with torch.no_grad():
        logits = teacher(tokens)
    mask = labels != -100
    p = torch.softmax(logits, -1)
    entropy = (-(p * torch.log_softmax(logits, -1)).sum(-1) * mask).sum() / mask.sum()
    assert trace.rows[0]["loss"] == pytest.approx(entropy.item(), abs=1e-12)


def test_pipeline_deterministic_and_trace_length():
    teacher = HybridLM(CFG, seed=8)
    plan = StagePlan((Stage("alignment", 4, 3e-3), Stage("kd", 4, 1e-3)))
    cfg = TINY.replace(log_every=2, eval_every=4)
    layout = HybridLayout(((2,), ()))
    s1, t1 = run_pipeline(teacher, layout, plan, cfg, TASK, hooks())
    s2, t2 = run_pipeline(teacher, layout, plan, cfg, TASK, hooks())
    assert t1.rows == t2.rows
    assert len(t1) == plan.total_steps // cfg.log_every
    assert all(torch.equal(a, b) for a, b in zip(s1.parameters(), s2.parameters()))
    assert t1.rows[1]["probe_acc"] is not None and t1.rows[0]["probe_acc"] is None


def test_pure_ssm_pipeline_runs():
    teacher = HybridLM(CFG, seed=9)
    plan = StagePlan((Stage("alignment", 2, 3e-3), Stage("kd", 2, 1e-3)))
    student, trace = run_pipeline(teacher, HybridLayout.empty(CFG), plan, TINY, TASK, hooks())
    assert student.layout.n_attention == 0 and len(trace) > 0


def test_nan_loss_aborts_with_trace():
    teacher = HybridLM(CFG, seed=10)
    with torch.no_grad():
        teacher.unembed.bias.fill_(float("nan"))
    with pytest.raises(ConvergenceError) as err:
        run_pipeline(teacher, HybridLayout.full(CFG), StagePlan((Stage("kd", 2, 1e-3),)), TINY, TASK, hooks())
    assert err.value.trace is not None


# --- teacher ------------------------------------------------------------------------


def test_teacher_initial_loss_and_failure_report():
    cfg = TrainConfig(total_steps=3, batch_size=8, log_every=1, eval_every=1)
    model, trace, ok = train_teacher(CFG, cfg, TASK, hooks())
    assert trace.rows[0]["loss"] == pytest.approx(math.log(53), abs=0.15)
    assert not ok
    assert trace.rows[0]["probe_acc"] < 0.5  # chance is about 1/n_pairs at best
    with pytest.raises(ConvergenceError):
        train_teacher(CFG, cfg, TASK, hooks(), raise_on_failure=True)


def test_teacher_is_deterministic():
    cfg = TrainConfig(total_steps=4, batch_size=4, log_every=1, eval_every=2)
    a, ta, _ = train_teacher(CFG, cfg, TASK, hooks())
    b, tb, _ = train_teacher(CFG, cfg, TASK, hooks())
    assert ta.rows == tb.rows
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_per_row_lm_loss_weights_rows_equally():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(3, 5, 7, generator=g)
    labels = torch.tensor([[1, 2, 3, 4, 5], [IGNORE, IGNORE, 6, IGNORE, IGNORE], [IGNORE] * 5])
    logp = torch.log_softmax(logits, -1)
    row0 = -sum(logp[0, t, labels[0, t]] for t in range(5)) / 5
    row1 = -logp[1, 2, 6]
    assert torch.allclose(lm_loss(logits, labels, per_row=True), (row0 + row1) / 2, atol=1e-12)
    token_mean = -(sum(logp[0, t, labels[0, t]] for t in range(5)) + logp[1, 2, 6]) / 6
    assert torch.allclose(lm_loss(logits, labels), token_mean, atol=1e-12)


def test_float32_training_returns_float64_models_and_restores_default():
    cfg = TrainConfig(total_steps=3, batch_size=4, log_every=1, eval_every=3, dtype="float32")
    teacher, _, _ = train_teacher(CFG, cfg, TASK, hooks())
    assert torch.get_default_dtype() == torch.float64
    assert all(p.dtype == torch.float64 for p in teacher.parameters())
    plan = StagePlan((Stage("alignment", 2, 3e-3), Stage("kd", 2, 1e-3)))
    student, _ = run_pipeline(teacher, HybridLayout(((1,), ())), plan, cfg, TASK, hooks())
    assert all(p.dtype == torch.float64 for p in student.parameters())
    assert all(p.dtype == torch.float64 for p in teacher.parameters())  # caller's teacher untouched
    with pytest.raises(ValueError):
        TrainConfig(dtype="float16")
