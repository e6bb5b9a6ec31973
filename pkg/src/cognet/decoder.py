"""Copy-or-generate scoring primitives and single-visit decode state.

The functions here are batch-agnostic: leading dimensions broadcast, so the
model uses the same code for teacher-forced batches and for beam steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from cognet.layers import masked_softmax


def generation_distribution(hidden, w_gen, b_gen):
    """Softmax over the clinical medications plus END (START has no column)."""
    return torch.softmax(hidden @ w_gen + b_gen, dim=-1)


def visit_scores(vd_cur, vp_cur, vd_hist, vp_hist, mask=None, use_diag=True, use_proc=True):
    """Softmax over past visits of (v_d_j . v_d_t + v_p_j . v_p_t) / sqrt(s).

    ``vd_cur``: (..., s); ``vd_hist``: (..., H, s).  Masked visits get 0.
    """
    if vd_hist.shape[-2] == 0:
        raise ValueError("no past visits to score")
    logits = torch.zeros(vd_hist.shape[:-1], dtype=vd_hist.dtype)
    if use_diag:
        logits = logits + (vd_hist * vd_cur.unsqueeze(-2)).sum(-1)
    if use_proc:
        logits = logits + (vp_hist * vp_cur.unsqueeze(-2)).sum(-1)
    scores = masked_softmax(logits / math.sqrt(vd_hist.shape[-1]), mask)
    return scores if mask is None else scores * mask


def medication_scores(hidden, med_hist, w_copy, mask=None):
    """Joint softmax over every (past visit, medication) slot.

    ``hidden``: (..., Lq, s); ``med_hist``: (..., N, s) with the past visits'
    encoded medications flattened into N slots; ``mask``: (..., N).
    """
    logits = (hidden @ w_copy) @ med_hist.transpose(-2, -1) / math.sqrt(hidden.shape[-1])
    if mask is None:
        return torch.softmax(logits, dim=-1)
    mask = mask.unsqueeze(-2)
    return masked_softmax(logits, mask) * mask


def copy_distribution(q, slot_weight, med_ids, size):
    """Gather slot scores onto medication ids and renormalize.

    ``q``: (..., N) medication-level scores, ``slot_weight``: (..., N) visit
    score of the visit owning each slot (ones to drop visit-level selection),
    ``med_ids``: (..., N) medication id of each slot.
    """
    weight = q * slot_weight
    ids = med_ids.expand_as(weight)
    raw = torch.zeros(*weight.shape[:-1], size, dtype=weight.dtype).scatter_add(-1, ids, weight)
    total = raw.sum(-1, keepdim=True)
    return raw / torch.where(total > 0, total, torch.ones_like(total))


def copy_gate(hidden, w_gate, b_gate):
    return torch.sigmoid(hidden @ w_gate + b_gate)


def copy_mix(pr_g, pr_c, w_g, has_history=True):
    """w_g * Pr_g + (1 - w_g) * Pr_c; without history Pr_g is returned as is."""
    if isinstance(has_history, bool):
        return w_g * pr_g + (1 - w_g) * pr_c if has_history else pr_g
    w_g = torch.where(has_history, w_g, torch.ones_like(w_g))
    return w_g * pr_g + (1 - w_g) * pr_c


def mask_generated(pr, generated_mask):
    """Zero already generated medications and renormalize."""
    kept = pr * (1.0 - generated_mask)
    return kept / kept.sum(-1, keepdim=True)


@dataclass(frozen=True)
class StepOutput:
    pr: np.ndarray
    pr_g: np.ndarray
    pr_c: np.ndarray
    w_g: float
    visit_scores: np.ndarray
    has_history: bool


@dataclass(frozen=True)
class DecodeState:
    """Partial output for one visit plus its cached encoder context (batch of one)."""

    context: object
    generated: tuple
    step_probs: tuple = field(default=())

    def extend(self, token: int) -> "DecodeState":
        if token in self.generated and token < self.context.n_medications:
            raise ValueError(f"medication {token} already generated")
        return DecodeState(self.context, self.generated + (int(token),), self.step_probs)


def decode_step(model, state: DecodeState):
    """Next-token distribution for ``state``; the returned state records it."""
    tokens = torch.tensor([state.generated], dtype=torch.long)
    with torch.no_grad():
        out = model.decode(state.context, tokens)
    last = {k: v[0, -1] for k, v in out.items() if k in ("pr", "pr_g", "pr_c", "w_g")}
    step = StepOutput(
        pr=last["pr"].double().numpy(),
        pr_g=last["pr_g"].double().numpy(),
        pr_c=last["pr_c"].double().numpy(),
        w_g=float(last["w_g"]),
        visit_scores=out["visit_scores"][0].double().numpy(),
        has_history=bool(state.context.has_history[0]),
    )
    new_state = DecodeState(state.context, state.generated, state.step_probs + (step.pr,))
    return step, new_state
