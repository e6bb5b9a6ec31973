"""The conditional generation recommender: encoders, graph fusion and copy decoder.

A *sample* is ``(visits, t)``: predict the medications of ``visits[t]`` from its
diagnoses/procedures and the full visits ``visits[:t]``.  Batches put the
target visit in slot 0 and its past visits in slots ``1..t``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
from torch import nn

from cognet.decoder import (
    copy_distribution,
    copy_gate,
    copy_mix,
    generation_distribution,
    mask_generated,
    medication_scores,
    visit_scores,
)
from cognet.encoders import SetEncoder, encode_set
from cognet.graphs import MedGraphEncoder
from cognet.layers import GatedAggregation, ModelConfig, MultiHeadAttention, ResidualNorm, init_parameters

ABLATIONS = ("copy", "visit_scores", "graphs", "diagnoses", "procedures")


@dataclass
class Batch:
    diag: torch.Tensor  # (B, T, Ld)
    diag_valid: torch.Tensor
    proc: torch.Tensor  # (B, T, Lp)
    proc_valid: torch.Tensor
    visit_valid: torch.Tensor  # (B, T); slot 0 is the target visit
    hist_meds: torch.Tensor  # (B, T-1, Lm)
    hist_med_valid: torch.Tensor

    @property
    def size(self):
        return self.diag.shape[0]


def _pad(rows, width, fill):
    out = np.full((len(rows), width), fill, dtype=np.int64)
    valid = np.zeros((len(rows), width), dtype=bool)
    for i, row in enumerate(rows):
        out[i, : len(row)] = row
        valid[i, : len(row)] = True
    return out, valid


def build_batch(samples, n_procedures: int) -> Batch:
    """Pack ``(visits, t)`` samples; empty procedure sets use the NULL row ``n_procedures``."""
    n_slots = max(2, 1 + max(t for _, t in samples))
    diag_rows, proc_rows, med_rows, slot_valid = [], [], [], []
    for visits, t in samples:
        if not 0 <= t < len(visits):
            raise IndexError(f"visit index {t} out of range for {len(visits)} visits")
        slots = [visits[t]] + list(visits[:t])
        for s in range(n_slots):
            if s < len(slots):
                v = slots[s]
                diag_rows.append(v.diagnoses)
                proc_rows.append(v.procedures or (n_procedures,))
                if s > 0:
                    med_rows.append(v.medications)
                slot_valid.append(True)
            else:
                diag_rows.append(())
                proc_rows.append(())
                med_rows.append(())
                slot_valid.append(False)
    b = len(samples)

    def packed(rows, fill, n):
        width = max(1, max(len(r) for r in rows))
        ids, valid = _pad(rows, width, fill)
        return torch.from_numpy(ids).view(b, n, width), torch.from_numpy(valid).view(b, n, width)

    diag, diag_valid = packed(diag_rows, 0, n_slots)
    proc, proc_valid = packed(proc_rows, 0, n_slots)
    meds, med_valid = packed(med_rows, 0, n_slots - 1)
    return Batch(
        diag, diag_valid, proc, proc_valid,
        torch.tensor(slot_valid).view(b, n_slots), meds, med_valid,
    )


def build_targets(med_lists, start_id: int, end_id: int):
    """Teacher-forcing inputs ``[START, m1..mk]`` and targets ``[m1..mk, END]``."""
    width = 1 + max(len(m) for m in med_lists)
    inputs = np.full((len(med_lists), width), end_id, dtype=np.int64)
    targets = np.zeros((len(med_lists), width), dtype=np.int64)
    mask = np.zeros((len(med_lists), width), dtype=bool)
    for i, meds in enumerate(med_lists):
        seq = list(meds)
        inputs[i, : len(seq) + 1] = [start_id] + seq
        targets[i, : len(seq) + 1] = seq + [end_id]
        mask[i, : len(seq) + 1] = True
    return torch.from_numpy(inputs), torch.from_numpy(targets), torch.from_numpy(mask)


@dataclass
class Context:
    """Encoded inputs for a batch of target visits."""

    diag: torch.Tensor  # (B, Ld, s) encoded current diagnoses
    diag_mask: torch.Tensor
    proc: torch.Tensor
    proc_mask: torch.Tensor
    med_hist: torch.Tensor  # (B, N, s) encoded past medications, flattened slots
    med_hist_ids: torch.Tensor  # (B, N)
    med_hist_mask: torch.Tensor
    slot_visit_score: torch.Tensor  # (B, N) visit score of the slot's visit
    visit_scores: torch.Tensor  # (B, H)
    has_history: torch.Tensor  # (B,)
    graph_emb: torch.Tensor  # (|M|+2, s), zero END/START rows
    n_medications: int

    def select(self, index) -> "Context":
        index = torch.as_tensor(index, dtype=torch.long)
        values = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("graph_emb", "n_medications"):
                values[f.name] = value
            else:
                values[f.name] = value[index]
        return Context(**values)


class COGNet(nn.Module):
    def __init__(self, config: ModelConfig, vocab_sizes, ehr_adj, ddi_adj, ablations=()):
        super().__init__()
        unknown = set(ablations) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablations {sorted(unknown)}; choose from {ABLATIONS}")
        self.config = config
        self.ablations = tuple(sorted(set(ablations)))
        n_diag, n_proc, n_med = (int(v) for v in vocab_sizes)
        self.vocab_sizes = (n_diag, n_proc, n_med)
        self.n_medications = n_med
        self.end_id, self.start_id = n_med, n_med + 1
        s, h = config.dim, config.heads
        f64 = torch.float64

        self.emb_diag = nn.Parameter(torch.empty(n_diag, s, dtype=f64))
        self.emb_proc = nn.Parameter(torch.empty(n_proc + 1, s, dtype=f64))  # + NULL row
        self.emb_med = nn.Parameter(torch.empty(n_med + 2, s, dtype=f64))  # + END, START

        self.enc_diag = SetEncoder(s, h, config.encoder_layers)
        self.enc_proc = SetEncoder(s, h, config.encoder_layers)
        self.enc_med = SetEncoder(s, h, config.encoder_layers)
        self.gate_diag = GatedAggregation(s, config.gate_dim)
        self.gate_proc = GatedAggregation(s, config.gate_dim)
        self.graph = MedGraphEncoder(ehr_adj, ddi_adj, s, config.lambda_init)
        if self.graph.n_medications != n_med:
            raise ValueError("graph size does not match the medication vocabulary")

        self.dec_self_attn = MultiHeadAttention(s, h)
        self.dec_norm1 = ResidualNorm(s)
        self.dec_cross_diag = MultiHeadAttention(s, h)
        self.dec_cross_proc = MultiHeadAttention(s, h)
        self.dec_norm2 = ResidualNorm(s)

        self.w_gen = nn.Parameter(torch.empty(s, n_med + 1, dtype=f64))  # clinical + END
        self.b_gen = nn.Parameter(torch.zeros(n_med + 1, dtype=f64))
        self.w_copy = nn.Parameter(torch.empty(s, s, dtype=f64))
        self.w_gate = nn.Parameter(torch.empty(s, 1, dtype=f64))
        self.b_gate = nn.Parameter(torch.zeros((), dtype=f64))

        init_parameters(self, s, config.init_seed)
        self.to(config.torch_dtype)

    # ------------------------------------------------------------------
    @property
    def dtype(self):
        return self.emb_med.dtype

    def uses(self, part: str) -> bool:
        return part not in self.ablations

    def _dropout(self, x):
        p = self.config.dropout
        return torch.nn.functional.dropout(x, p, self.training) if p > 0 else x

    def graph_embedding(self):
        dim = self.config.dim
        if not self.uses("graphs"):
            return torch.zeros(self.n_medications + 2, dim, dtype=self.dtype)
        fused = self.graph(self.emb_med[: self.n_medications])
        return torch.cat([fused, torch.zeros(2, dim, dtype=fused.dtype)], dim=0)

    def _encode_slots(self, ids, valid, table, encoder, gate):
        b, t, width = ids.shape
        flat_ids, flat_valid = ids.reshape(b * t, width), valid.reshape(b * t, width)
        # padded slots keep one visible key so attention stays well defined
        enc_mask = flat_valid.clone()
        enc_mask[:, 0] = True
        enc = encode_set(flat_ids, self._dropout(table), encoder, enc_mask)
        vec = gate(enc, enc_mask)
        return enc.view(b, t, width, -1), vec.view(b, t, -1)

    def encode_context(self, batch: Batch) -> Context:
        s = self.config.dim
        b, n_slots = batch.visit_valid.shape
        hist_valid = batch.visit_valid[:, 1:]
        zeros_vec = torch.zeros(b, n_slots, s, dtype=self.dtype)

        if self.uses("diagnoses"):
            diag_enc, vd = self._encode_slots(batch.diag, batch.diag_valid, self.emb_diag, self.enc_diag, self.gate_diag)
        else:
            diag_enc, vd = None, zeros_vec
        if self.uses("procedures"):
            proc_enc, vp = self._encode_slots(batch.proc, batch.proc_valid, self.emb_proc, self.enc_proc, self.gate_proc)
        else:
            proc_enc, vp = None, zeros_vec

        c = visit_scores(
            vd[:, 0], vp[:, 0], vd[:, 1:], vp[:, 1:], hist_valid,
            use_diag=self.uses("diagnoses"), use_proc=self.uses("procedures"),
        )

        h, width = batch.hist_meds.shape[1:]
        flat = batch.hist_meds.reshape(b * h, width)
        enc_mask = batch.hist_med_valid.reshape(b * h, width).clone()
        enc_mask[:, 0] = True
        med_hist = encode_set(flat, self._dropout(self.emb_med), self.enc_med, enc_mask).view(b, h * width, s)
        slot_mask = (batch.hist_med_valid & hist_valid.unsqueeze(-1)).reshape(b, h * width)
        if self.uses("visit_scores"):
            slot_score = c.unsqueeze(-1).expand(b, h, width).reshape(b, h * width)
        else:
            slot_score = torch.ones(b, h * width, dtype=self.dtype)

        first = lambda enc, valid: (enc[:, 0], valid[:, 0]) if enc is not None else (None, None)
        d, d_mask = first(diag_enc, batch.diag_valid)
        p, p_mask = first(proc_enc, batch.proc_valid)
        return Context(
            diag=d, diag_mask=d_mask, proc=p, proc_mask=p_mask,
            med_hist=med_hist, med_hist_ids=batch.hist_meds.reshape(b, h * width),
            med_hist_mask=slot_mask, slot_visit_score=slot_score, visit_scores=c,
            has_history=hist_valid.any(dim=1), graph_emb=self.graph_embedding(),
            n_medications=self.n_medications,
        )

    def decoder_hidden(self, ctx: Context, tokens, token_mask=None):
        """Hidden states for every prefix position: (B, L, s)."""
        b, length = tokens.shape
        x = self._dropout(self.emb_med)[tokens]
        if self.uses("graphs"):
            x = x + ctx.graph_emb[tokens]
        causal = torch.tril(torch.ones(length, length, dtype=torch.bool)).expand(b, length, length)
        if token_mask is not None:
            causal = causal & token_mask.unsqueeze(1)
        h1 = self.dec_norm1(x, self.dec_self_attn(x, x, x, causal))
        cross = torch.zeros_like(h1)
        if self.uses("diagnoses"):
            cross = cross + self.dec_cross_diag(h1, ctx.diag, ctx.diag, ctx.diag_mask.unsqueeze(1))
        if self.uses("procedures"):
            cross = cross + self.dec_cross_proc(h1, ctx.proc, ctx.proc, ctx.proc_mask.unsqueeze(1))
        return self.dec_norm2(h1, cross)

    def decode(self, ctx: Context, tokens, token_mask=None):
        """Per-position output distributions over clinical medications + END.

        Position ``i`` predicts the token following ``tokens[:, :i+1]``;
        medications among ``tokens[:, 1:i+1]`` are masked out.
        """
        hidden = self.decoder_hidden(ctx, tokens, token_mask)
        n_out = self.n_medications + 1
        pr_g = generation_distribution(hidden, self.w_gen, self.b_gen)
        if self.uses("copy"):
            q = medication_scores(hidden, ctx.med_hist, self.w_copy, ctx.med_hist_mask)
            pr_c = copy_distribution(q, ctx.slot_visit_score.unsqueeze(1), ctx.med_hist_ids.unsqueeze(1), n_out)
            w_g = copy_gate(hidden, self.w_gate, self.b_gate)
            w_g = torch.where(ctx.has_history.view(-1, 1, 1), w_g, torch.ones_like(w_g))
            pr = copy_mix(pr_g, pr_c, w_g)
        else:
            pr_c = torch.zeros_like(pr_g)
            w_g = torch.ones(*pr_g.shape[:-1], 1, dtype=pr_g.dtype)
            pr = pr_g
        pr = mask_generated(pr, self.generated_mask(tokens, token_mask))
        return {"pr": pr, "pr_g": pr_g, "pr_c": pr_c, "w_g": w_g.squeeze(-1), "visit_scores": ctx.visit_scores}

    def generated_mask(self, tokens, token_mask=None):
        """(B, L, |M|+1): 1 where a clinical medication already appears in the prefix."""
        clinical = tokens < self.n_medications
        if token_mask is not None:
            clinical = clinical & token_mask
        onehot = torch.zeros(*tokens.shape, self.n_medications + 1, dtype=self.dtype)
        onehot.scatter_(-1, torch.where(clinical, tokens, 0).unsqueeze(-1), clinical.unsqueeze(-1).to(self.dtype))
        return onehot.cumsum(dim=1).clamp_max(1.0)

    def forward(self, batch: Batch, tokens, token_mask=None):
        return self.decode(self.encode_context(batch), tokens, token_mask)

    def token_log_probs(self, batch: Batch, inputs, targets, mask):
        """log Pr(target) at every valid position, teacher forced; (B, L)."""
        pr = self.forward(batch, inputs, mask)["pr"]
        picked = pr.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        tiny = torch.finfo(pr.dtype).tiny
        return torch.log(picked.clamp_min(tiny)) * mask

    def n_parameters(self):
        return sum(p.numel() for p in self.parameters())

