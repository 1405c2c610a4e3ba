"""Single-head ablation scoring on the retrieval probe."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .model import HybridLM
from .taskgen import NEWLINE, SequenceBatch


@dataclass(frozen=True)
class ImportanceRecord:
    layer: int
    head: int
    head_kind: str
    ablated_accuracy: float
    drop: float


@dataclass
class ImportanceTable:
    baseline_accuracy: float
    records: list[ImportanceRecord] = field(default_factory=list)

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: (r.ablated_accuracy, r.layer, r.head))

    def top(self, k: int, kind: str | None = None) -> list[ImportanceRecord]:
        rows = [r for r in self.records if kind is None or r.head_kind == kind]
        return rows[:k]

    def top_heads(self, k: int) -> list[tuple[int, int]]:
        return [(r.layer, r.head) for r in self.records[:k]]

    def drops(self) -> dict[tuple[int, int], float]:
        return {(r.layer, r.head): r.drop for r in self.records}


@dataclass(frozen=True)
class AblatedView:
    """Forward pass of ``model`` with some head chunks zeroed; the model itself is untouched."""

    model: HybridLM
    heads: frozenset

    def __call__(self, tokens: torch.Tensor, **kw) -> torch.Tensor:
        return self.model(tokens, ablate=self.heads, **kw)

    def ablate(self, layer: int, head: int) -> "AblatedView":
        return ablate_head(self, layer, head)

    def restore(self, layer: int, head: int) -> "AblatedView":
        return AblatedView(self.model, self.heads - {(layer, head)})


def ablate_head(model: HybridLM | AblatedView, layer: int, head: int) -> AblatedView:
    base = model if isinstance(model, AblatedView) else AblatedView(model, frozenset())
    base.model.head_kind(layer, head)  # validates the index
    return AblatedView(base.model, base.heads | {(layer, head)})


def _logits_at_answer(fn, probe: SequenceBatch, batch_size: int) -> torch.Tensor:
    out = []
    tokens = torch.as_tensor(probe.tokens)
    pos = torch.as_tensor(probe.answer_pos)
    with torch.no_grad():
        for i in range(0, len(probe), batch_size):
            logits = fn(tokens[i:i + batch_size])
            out.append(logits[torch.arange(logits.shape[0]), pos[i:i + batch_size]])
    return torch.cat(out)


def probe_accuracy(fn, probe: SequenceBatch, batch_size: int = 256) -> float:
    if len(probe) == 0:
        raise ValueError("empty probe")
    pred = _logits_at_answer(fn, probe, batch_size).argmax(-1).numpy()
    return float(np.mean(pred == probe.target))


def score_all_heads(model: HybridLM, probe: SequenceBatch, batch_size: int = 256) -> ImportanceTable:
    """Ablate every head once; one record per head, ranked by ablated accuracy (ties by layer, head)."""
    baseline = probe_accuracy(model, probe, batch_size)
    records = []
    for layer in range(model.cfg.n_layers):
        for head in range(model.cfg.n_heads):
            acc = probe_accuracy(ablate_head(model, layer, head), probe, batch_size)
            records.append(ImportanceRecord(layer, head, model.head_kind(layer, head), acc, baseline - acc))
    return ImportanceTable(baseline, records)


def separator_attention_mass(model: HybridLM, layer: int, head: int, probe: SequenceBatch) -> float:
    """Mean attention probability that ``(layer, head)`` puts on NEWLINE tokens at the answer position."""
    if model.head_kind(layer, head) != "attention":
        raise TypeError(f"head ({layer}, {head}) is an SSM head; separator mass needs attention weights")
    from .model import attention_weights

    tokens = torch.as_tensor(probe.tokens)
    with torch.no_grad():
        _, hidden = model(tokens, return_hidden=True)
        block = model.layers[layer]
        w = attention_weights(block.attention_head(head), block.ln1(hidden[layer]))
    rows = torch.arange(len(probe))
    at_answer = w[rows, torch.as_tensor(probe.answer_pos)]  # [B, T]
    is_sep = torch.as_tensor(probe.tokens == NEWLINE, dtype=at_answer.dtype)
    return float((at_answer * is_sep).sum(-1).mean())


def spearman(a: dict, b: dict) -> float:
    """Spearman rank correlation of two score maps over their shared keys (average ranks for ties)."""
    from scipy.stats import spearmanr

    keys = sorted(set(a) & set(b))
    return float(spearmanr([a[k] for k in keys], [b[k] for k in keys]).statistic)
