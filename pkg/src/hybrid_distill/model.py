"""Decoder-only LM whose mixer heads are either causal softmax attention or a diagonal
selective SSM, plus the parameter-free adapter that joins the two inside one layer.

A model with every slot set to attention *is* the teacher; students reuse the same
class with a sparser :class:`HybridLayout`, so the all-attention hybrid and the
teacher share one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

ADAPTER_EPS = 1e-5
MAX_MATERIALIZE_T = 512


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 8
    d_model: int = 64
    vocab_size: int = 53
    max_T: int = 64
    d_state: int | None = None
    mlp_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.state_dim < 1:
            raise ValueError("d_state must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def state_dim(self) -> int:
        return self.d_head if self.d_state is None else self.d_state

    @property
    def total_heads(self) -> int:
        return self.n_layers * self.n_heads

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**self.__dict__, **kw})


@dataclass(frozen=True)
class HybridLayout:
    """Per layer, the sorted head slots that stay attention; every other slot is an SSM head."""

    retained: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "retained", tuple(tuple(sorted(set(r))) for r in self.retained))

    @classmethod
    def full(cls, cfg: ModelConfig) -> "HybridLayout":
        return cls(tuple(tuple(range(cfg.n_heads)) for _ in range(cfg.n_layers)))

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "HybridLayout":
        return cls(tuple(() for _ in range(cfg.n_layers)))

    @classmethod
    def from_heads(cls, cfg: ModelConfig, heads: Iterable[tuple[int, int]]) -> "HybridLayout":
        per = [set() for _ in range(cfg.n_layers)]
        for layer, head in heads:
            per[layer].add(head)
        layout = cls(tuple(tuple(p) for p in per))
        layout.validate(cfg)
        return layout

    @classmethod
    def from_layers(cls, cfg: ModelConfig, layers: Iterable[int]) -> "HybridLayout":
        keep = set(layers)
        return cls.from_heads(cfg, [(l, h) for l in keep for h in range(cfg.n_heads)])

    def validate(self, cfg: ModelConfig) -> None:
        if len(self.retained) != cfg.n_layers:
            raise ValueError(f"layout has {len(self.retained)} layers, config has {cfg.n_layers}")
        for layer, slots in enumerate(self.retained):
            if any(not 0 <= s < cfg.n_heads for s in slots):
                raise ValueError(f"layer {layer}: head index out of range in {slots}")

    @property
    def heads(self) -> list[tuple[int, int]]:
        return [(l, h) for l, slots in enumerate(self.retained) for h in slots]

    @property
    def n_attention(self) -> int:
        return sum(len(r) for r in self.retained)

    def to_lists(self) -> list[list[int]]:
        return [list(r) for r in self.retained]


# --- single-head mixers -------------------------------------------------------


@dataclass
class AttentionHead:
    Wq: torch.Tensor  # [d_model, d_head]
    Wk: torch.Tensor
    Wv: torch.Tensor

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.Wq.shape[-1])


@dataclass
class SSMHead:
    W_a: torch.Tensor  # [d_head, d_state]
    b_a: torch.Tensor  # [d_state]
    W_B: torch.Tensor  # [d_head, d_state]
    W_C: torch.Tensor  # [d_head, d_state]
    D: torch.Tensor  # [d_head]

    def coefficients(self, Xc: torch.Tensor):
        """Per-step decay ``a`` (and its log), input map ``B`` and readout ``C`` for chunk input ``Xc``."""
        z = Xc @ self.W_a + self.b_a
        return torch.sigmoid(z), F.logsigmoid(z), Xc @ self.W_B, Xc @ self.W_C


@dataclass
class MixerMatrix:
    """``Y = M @ X + skip * X`` along the time axis; ``skip`` is the per-channel D path (SSM only)."""

    M: torch.Tensor  # [..., T, T]
    skip: torch.Tensor | None = None

    def apply(self, X: torch.Tensor) -> torch.Tensor:
        Y = self.M @ X
        return Y if self.skip is None else Y + self.skip * X


def _causal_mask(T: int, device=None) -> torch.Tensor:
    return torch.ones(T, T, dtype=torch.bool, device=device).tril()


def attention_weights(head: AttentionHead, X: torch.Tensor) -> torch.Tensor:
    q, k = X @ head.Wq, X @ head.Wk
    logits = (q @ k.transpose(-1, -2)) * head.scale
    T = X.shape[-2]
    logits = logits.masked_fill(~_causal_mask(T, X.device), float("-inf"))
    return torch.softmax(logits, dim=-1)


def attention_mix(head: AttentionHead, X: torch.Tensor) -> torch.Tensor:
    """Causal softmax attention of one head on the full residual ``X`` [..., T, d_model]."""
    return attention_weights(head, X) @ (X @ head.Wv)


def selective_scan(a, B, C, D, x) -> torch.Tensor:
    """Sequential recurrence h_t = diag(a_t) h_{t-1} + B_t x_tᵀ, y_t = C_tᵀ h_t + D ⊙ x_t.

    Shapes: a, B, C [..., T, N]; D [dh]; x [..., T, dh]. h_0 = 0.
    """
    T = x.shape[-2]
    h = x.new_zeros(*x.shape[:-2], a.shape[-1], x.shape[-1])
    ys = []
    for t in range(T):
        h = a[..., t, :, None] * h + B[..., t, :, None] * x[..., t, None, :]
        ys.append((C[..., t, :, None] * h).sum(-2) + D * x[..., t, :])
        if not torch.isfinite(h).all():
            raise FloatingPointError(f"SSM state became non-finite at step {t}")
    return torch.stack(ys, dim=-2)


def ssm_scan(head: SSMHead, Xc: torch.Tensor) -> torch.Tensor:
    a, _, B, C = head.coefficients(Xc)
    return selective_scan(a, B, C, head.D, Xc)


def ssm_kernel(log_a, B, C) -> torch.Tensor:
    """M[t, s] = Σ_n C[t,n] B[s,n] ∏_{j=s+1..t} a[j,n] for s ≤ t, else 0; shapes [..., T, N] -> [..., T, T]."""
    T = log_a.shape[-2]
    cum = torch.cumsum(log_a, dim=-2)
    seg = cum.unsqueeze(-2) - cum.unsqueeze(-3)  # [..., t, s, N]
    mask = _causal_mask(T, log_a.device)[..., None]
    decay = torch.exp(seg.masked_fill(~mask, float("-inf")))
    return (C.unsqueeze(-2) * B.unsqueeze(-3) * decay).sum(-1)


def chunked_scan(log_a, B, C, x, chunk: int = 8) -> torch.Tensor:
    """The SSM mixer applied to ``x`` (D path excluded) without forming the T×T kernel.

    Within each chunk of ``chunk`` steps the kernel is formed exactly as in
    :func:`ssm_kernel`; chunk-final states are carried across chunks by the same
    recurrence at chunk granularity. Shapes: log_a, B, C [..., T, N]; x [..., T, dh].
    """
    *lead, T, N = log_a.shape
    dh = x.shape[-1]
    K = -(-T // chunk)
    pad = K * chunk - T
    if pad:
        # zero decay-log, B, C and x on padded steps: no effect on the real ones, which precede them
        log_a, B, C, x = (F.pad(t, (0, 0, 0, pad)) for t in (log_a, B, C, x))
    la, Bc, Cc, xc = (t.reshape(*lead, K, chunk, t.shape[-1]) for t in (log_a, B, C, x))
    y = ssm_kernel(la, Bc, Cc) @ xc  # intra-chunk: [..., K, Q, dh]
    if K > 1:
        cum = torch.cumsum(la, dim=-2)  # [..., K, Q, N]
        total = cum[..., -1:, :]  # log decay across each whole chunk
        # state contributed by chunk k at its end: Σ_s exp(total - cum_s) B_s x_sᵀ
        states = (Bc * torch.exp(total - cum)).transpose(-1, -2) @ xc  # [..., K, N, dh]
        # state entering chunk k: Σ_{j<k} exp(Σ_{i=j+1..k-1} total_i) states_j
        tot = total.squeeze(-2)  # [..., K, N]
        ctot = torch.cumsum(tot, dim=-2)
        seg = ctot[..., :-1, None, :] - ctot[..., None, :-1, :]  # [..., k-1, j, N]
        mask = _causal_mask(K - 1, log_a.device)[..., None]
        decay = torch.exp(seg.masked_fill(~mask, float("-inf")))
        h_in = torch.einsum("...kjn,...jnd->...knd", decay, states[..., :-1, :, :])  # entering chunks 1..K-1
        y_in = (Cc[..., 1:, :, :] * torch.exp(cum[..., 1:, :, :])) @ h_in
        y = torch.cat([y[..., :1, :, :], y[..., 1:, :, :] + y_in], dim=-3)
    return y.reshape(*lead, K * chunk, dh)[..., :T, :]


def materialize_mixer(head: AttentionHead | SSMHead, X: torch.Tensor) -> MixerMatrix:
    """Explicit T×T token-mixing operator of a head.

    Attention acts on ``X @ Wv`` with row-stochastic weights; the SSM acts on its input
    chunk directly and carries D as a separate per-channel diagonal path.
    """
    T = X.shape[-2]
    if T > MAX_MATERIALIZE_T:
        raise CapacityError(f"T={T} too large to materialize (limit {MAX_MATERIALIZE_T})")
    if isinstance(head, AttentionHead):
        return MixerMatrix(attention_weights(head, X))
    if isinstance(head, SSMHead):
        _, log_a, B, C = head.coefficients(X)
        return MixerMatrix(ssm_kernel(log_a, B, C), head.D)
    raise TypeError(f"not a mixer head: {type(head).__name__}")


def adapter_normalize(att: torch.Tensor, ssm: torch.Tensor, eps: float = ADAPTER_EPS) -> torch.Tensor:
    """Whiten ``att`` per position over its features, then re-color it with ``ssm``'s mean/std."""
    if att.shape[-1] < 2 or ssm.shape[-1] < 2:
        raise ValueError("adapter needs at least 2 features on each side")
    mu_x, std_x = att.mean(-1, keepdim=True), att.std(-1, keepdim=True)
    mu_y, std_y = ssm.mean(-1, keepdim=True), ssm.std(-1, keepdim=True)
    return (att - mu_x) / (std_x + eps) * (std_y + eps) + mu_y


# --- layers -----------------------------------------------------------------


class HybridLayer(nn.Module):
    """Pre-norm block: residual += out_proj(mix(ln1(x))); residual += MLP(ln2(x))."""

    def __init__(self, cfg: ModelConfig, retained: Sequence[int]):
        super().__init__()
        self.cfg = cfg
        H, dh, d, N = cfg.n_heads, cfg.d_head, cfg.d_model, cfg.state_dim
        self.attn_slots = tuple(sorted(retained))
        self.ssm_slots = tuple(s for s in range(H) if s not in set(self.attn_slots))
        k, m = len(self.attn_slots), len(self.ssm_slots)
        order = list(self.attn_slots) + list(self.ssm_slots)
        self.register_buffer("slot_order", torch.tensor([order.index(s) for s in range(H)]), persistent=False)

        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.Wq = nn.Parameter(torch.empty(k, d, dh)) if k else None
        self.Wk = nn.Parameter(torch.empty(k, d, dh)) if k else None
        self.Wv = nn.Parameter(torch.empty(k, d, dh)) if k else None
        self.W_a = nn.Parameter(torch.empty(m, dh, N)) if m else None
        self.b_a = nn.Parameter(torch.empty(m, N)) if m else None
        self.W_B = nn.Parameter(torch.empty(m, dh, N)) if m else None
        self.W_C = nn.Parameter(torch.empty(m, dh, N)) if m else None
        self.D = nn.Parameter(torch.empty(m, dh)) if m else None
        self.out_proj = nn.Linear(d, d)
        self.fc1 = nn.Linear(d, cfg.mlp_mult * d)
        self.fc2 = nn.Linear(cfg.mlp_mult * d, d)

    @property
    def is_mixed(self) -> bool:
        return bool(self.attn_slots) and bool(self.ssm_slots)

    def attention_head(self, slot: int) -> AttentionHead:
        i = self.attn_slots.index(slot)
        return AttentionHead(self.Wq[i], self.Wk[i], self.Wv[i])

    def ssm_head(self, slot: int) -> SSMHead:
        i = self.ssm_slots.index(slot)
        return SSMHead(self.W_a[i], self.b_a[i], self.W_B[i], self.W_C[i], self.D[i])

    def head_kind(self, slot: int) -> str:
        return "attention" if slot in self.attn_slots else "ssm"

    def attention_params(self) -> list[nn.Parameter]:
        return [p for p in (self.Wq, self.Wk, self.Wv) if p is not None]

    def ssm_params(self) -> list[nn.Parameter]:
        return [p for p in (self.W_a, self.b_a, self.W_B, self.W_C, self.D) if p is not None]

    def _attention(self, h: torch.Tensor) -> torch.Tensor:
        q = torch.einsum("btd,hde->bhte", h, self.Wq)
        k = torch.einsum("btd,hde->bhte", h, self.Wk)
        v = torch.einsum("btd,hde->bhte", h, self.Wv)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return y.transpose(1, 2)  # [B, T, k, dh]

    def _ssm(self, h: torch.Tensor, sequential: bool = False) -> torch.Tensor:
        B_, T, _ = h.shape
        xc = h.view(B_, T, self.cfg.n_heads, self.cfg.d_head)[:, :, list(self.ssm_slots)]
        xc = xc.permute(0, 2, 1, 3)  # [B, m, T, dh]
        z = torch.einsum("bmtd,mdn->bmtn", xc, self.W_a) + self.b_a[:, None]
        Bm = torch.einsum("bmtd,mdn->bmtn", xc, self.W_B)
        Cm = torch.einsum("bmtd,mdn->bmtn", xc, self.W_C)
        if sequential:
            y = selective_scan(torch.sigmoid(z), Bm, Cm, self.D, xc)
        else:
            y = chunked_scan(F.logsigmoid(z), Bm, Cm, xc) + self.D[:, None, :] * xc
        return y.permute(0, 2, 1, 3)  # [B, T, m, dh]

    def mix(self, h: torch.Tensor, ablate: Iterable[int] = (), sequential: bool = False) -> torch.Tensor:
        """Head outputs re-concatenated in slot order, before ``out_proj``: [B, T, d_model]."""
        B_, T, d = h.shape
        ablate = set(ablate)
        parts = []
        att = ssm = None
        if self.attn_slots:
            att = self._attention(h)
            if ablate & set(self.attn_slots):
                keep = torch.tensor([s not in ablate for s in self.attn_slots], dtype=h.dtype)
                att = att * keep[:, None]
            att = att.reshape(B_, T, -1)
        if self.ssm_slots:
            ssm = self._ssm(h, sequential)
            if ablate & set(self.ssm_slots):
                keep = torch.tensor([s not in ablate for s in self.ssm_slots], dtype=h.dtype)
                ssm = ssm * keep[:, None]
            ssm = ssm.reshape(B_, T, -1)
        if att is None:
            return ssm
        if ssm is None:
            return att
        parts = torch.cat([adapter_normalize(att, ssm), ssm], dim=-1)
        return parts.view(B_, T, self.cfg.n_heads, self.cfg.d_head)[:, :, self.slot_order].reshape(B_, T, d)

    def forward(self, x: torch.Tensor, ablate: Iterable[int] = (), sequential: bool = False) -> torch.Tensor:
        x = x + self.out_proj(self.mix(self.ln1(x), ablate, sequential))
        return x + self.fc2(F.relu(self.fc1(self.ln2(x))))


class HybridLM(nn.Module):
    def __init__(self, cfg: ModelConfig, layout: HybridLayout | None = None, seed: int = 0):
        super().__init__()
        layout = HybridLayout.full(cfg) if layout is None else layout
        layout.validate(cfg)
        self.cfg = cfg
        self.layout = layout
        self.tok_emb = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.pos_emb = nn.Parameter(torch.empty(cfg.max_T, cfg.d_model))
        self.layers = nn.ModuleList(HybridLayer(cfg, r) for r in layout.retained)
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.unembed = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        d, dh = self.cfg.d_model, self.cfg.d_head
        with torch.no_grad():
            # unit-scale embeddings: at 0.02 the retrieval circuit barely trains
            self.tok_emb.normal_(0.0, 1.0, generator=g)
            self.pos_emb.normal_(0.0, 1.0, generator=g)
            for layer in self.layers:
                for p in layer.attention_params():
                    p.normal_(0.0, d ** -0.5, generator=g)
                init_ssm_(layer, g)
                for lin in (layer.out_proj, layer.fc1, layer.fc2):
                    bound = lin.in_features ** -0.5
                    lin.weight.uniform_(-bound, bound, generator=g)
                    lin.bias.zero_()
            self.unembed.weight.normal_(0.0, 0.02, generator=g)
            self.unembed.bias.zero_()

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        T = tokens.shape[-1]
        if T > self.cfg.max_T:
            raise ValueError(f"sequence length {T} exceeds max_T={self.cfg.max_T}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError("token id out of range")
        return self.tok_emb[tokens] + self.pos_emb[:T]

    def forward(self, tokens: torch.Tensor, ablate: Iterable[tuple[int, int]] = (),
                return_hidden: bool = False, sequential: bool = False):
        per_layer: dict[int, set[int]] = {}
        for layer, head in ablate:
            per_layer.setdefault(layer, set()).add(head)
        x = self.embed(tokens)
        hidden = [x]
        for i, layer in enumerate(self.layers):
            x = layer(x, per_layer.get(i, ()), sequential)
            hidden.append(x)
        logits = self.unembed(self.ln_f(x))
        return (logits, hidden) if return_hidden else logits

    def head_kind(self, layer: int, head: int) -> str:
        if not (0 <= layer < self.cfg.n_layers and 0 <= head < self.cfg.n_heads):
            raise IndexError(f"no head ({layer}, {head})")
        return self.layers[layer].head_kind(head)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_ssm_(layer: HybridLayer, g: torch.Generator, decay: float = 0.9) -> None:
    """a ≈ ``decay`` (long memory), small random B and C, D = 1."""
    if not layer.ssm_slots:
        return
    dh = layer.cfg.d_head
    with torch.no_grad():
        layer.W_a.normal_(0.0, 0.02, generator=g)
        layer.b_a.fill_(math.log(decay / (1 - decay)))
        layer.W_B.normal_(0.0, 0.5 * dh ** -0.5, generator=g)
        layer.W_C.normal_(0.0, 0.5 * dh ** -0.5, generator=g)
        layer.D.fill_(1.0)


def build_student(teacher: HybridLM, layout: HybridLayout, seed: int = 0, d_state: int | None = None) -> HybridLM:
    """Hybrid student: every non-mixer weight and each retained head is copied bit-for-bit
    from the teacher; replaced heads become freshly initialised SSM heads."""
    cfg = teacher.cfg if d_state is None else teacher.cfg.replace(d_state=d_state)
    student = HybridLM(cfg, layout, seed=seed)
    t_state = teacher.state_dict()
    with torch.no_grad():
        student.tok_emb.copy_(teacher.tok_emb)
        student.pos_emb.copy_(teacher.pos_emb)
        student.ln_f.load_state_dict(teacher.ln_f.state_dict())
        student.unembed.load_state_dict(teacher.unembed.state_dict())
        for i, (s_layer, t_layer) in enumerate(zip(student.layers, teacher.layers)):
            for name in ("ln1", "ln2", "out_proj", "fc1", "fc2"):
                getattr(s_layer, name).load_state_dict(getattr(t_layer, name).state_dict())
            for slot in s_layer.attn_slots:
                if slot not in t_layer.attn_slots:
                    raise ValueError(f"layer {i} head {slot} is not an attention head in the source model")
                j, tj = s_layer.attn_slots.index(slot), t_layer.attn_slots.index(slot)
                for name in ("Wq", "Wk", "Wv"):
                    getattr(s_layer, name)[j].copy_(getattr(t_layer, name)[tj])
    del t_state
    return student


def clone_model(model: HybridLM) -> HybridLM:
    twin = HybridLM(model.cfg, model.layout, seed=0)
    twin.load_state_dict(model.state_dict())
    return twin
