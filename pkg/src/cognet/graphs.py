"""Medication co-occurrence / interaction graphs and the two-branch GCN encoder."""
from __future__ import annotations

import csv
import io
import logging
from itertools import combinations
from pathlib import Path

import numpy as np
import torch
from torch import nn

from cognet._io import atomic_write_bytes, atomic_write_json

logger = logging.getLogger(__name__)


def build_ehr_graph(train_records, n_medications: int) -> np.ndarray:
    """Binary symmetric co-occurrence matrix over clinical medication ids."""
    adj = np.zeros((n_medications, n_medications), dtype=np.float64)
    for patient in train_records:
        for visit in patient.visits:
            meds = visit.medications
            for i, j in combinations(meds, 2):
                adj[i, j] = adj[j, i] = 1.0
    return adj


def ddi_from_pairs(pairs, n_medications: int) -> np.ndarray:
    adj = np.zeros((n_medications, n_medications), dtype=np.float64)
    for i, j in pairs:
        if i != j:
            adj[i, j] = adj[j, i] = 1.0
    return adj


def load_ddi_graph(path, vocab):
    """Read a two-column CSV of interacting medication codes.

    Rows naming codes outside ``vocab`` are skipped.  Returns
    ``(adjacency, n_pairs, n_skipped)``.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValueError(f"cannot read DDI edge list {path}: {exc}") from exc
    pairs, skipped = set(), 0
    for row in csv.reader(io.StringIO(text)):
        row = [c.strip() for c in row if c.strip()]
        if len(row) < 2 or row[0].startswith("#") or row[:2] == ["code_a", "code_b"]:
            continue
        a, b = row[0], row[1]
        if a not in vocab.code_to_id or b not in vocab.code_to_id:
            skipped += 1
            continue
        i, j = vocab.code_to_id[a], vocab.code_to_id[b]
        if i != j:
            pairs.add((min(i, j), max(i, j)))
    if skipped:
        logger.warning("skipped %d DDI rows with codes outside the medication vocabulary", skipped)
    return ddi_from_pairs(pairs, vocab.size), len(pairs), skipped


def write_ddi_edge_list(path, pairs, vocab):
    lines = ["code_a,code_b"] + [f"{vocab.id_to_code[i]},{vocab.id_to_code[j]}" for i, j in pairs]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def export_adjacency(path, adj: np.ndarray, vocab):
    """Dense binary matrix as ``.npy`` plus a JSON header next to it."""
    path = Path(path)
    buf = io.BytesIO()
    np.save(buf, adj.astype(np.uint8))
    atomic_write_bytes(path.with_suffix(".npy"), buf.getvalue())
    atomic_write_json(
        path.with_suffix(".json"),
        {"shape": list(adj.shape), "vocab_hash": vocab.digest(), "n_edges": int(np.triu(adj, 1).sum())},
    )


def normalize_adjacency(adj):
    """O^-1/2 (A + I) O^-1/2 with O the degree matrix of A + I."""
    if isinstance(adj, np.ndarray):
        adj = torch.from_numpy(adj)
    adj_hat = adj + torch.eye(adj.shape[0], dtype=adj.dtype)
    inv_sqrt = adj_hat.sum(dim=1).pow(-0.5)
    return inv_sqrt[:, None] * adj_hat * inv_sqrt[None, :]


def gcn_layer(x: torch.Tensor, adj: torch.Tensor, normalized: bool = False) -> torch.Tensor:
    """One propagation step; no weight and no nonlinearity."""
    if adj.dim() != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError(f"adjacency must be square, got {tuple(adj.shape)}")
    if x.shape[0] != adj.shape[0]:
        raise ValueError(f"feature rows {x.shape[0]} != graph nodes {adj.shape[0]}")
    norm = adj if normalized else normalize_adjacency(adj)
    return norm @ x


class MedGraphEncoder(nn.Module):
    """E_g = G_e - lambda * G_d, each branch GCN(ReLU(GCN(E_m, A)) W, A)."""

    def __init__(self, ehr_adj, ddi_adj, dim: int, lambda_init: float = 0.1):
        super().__init__()
        ehr_adj = torch.as_tensor(np.asarray(ehr_adj), dtype=torch.float64)
        ddi_adj = torch.as_tensor(np.asarray(ddi_adj), dtype=torch.float64)
        if ehr_adj.shape != ddi_adj.shape:
            raise ValueError("EHR and DDI graphs must cover the same medications")
        self.n_medications = ehr_adj.shape[0]
        self.register_buffer("ehr_adj", ehr_adj)
        self.register_buffer("ddi_adj", ddi_adj)
        self.register_buffer("ehr_norm", normalize_adjacency(ehr_adj))
        self.register_buffer("ddi_norm", normalize_adjacency(ddi_adj))
        self.w_ehr = nn.Parameter(torch.empty(dim, dim, dtype=torch.float64))
        self.w_ddi = nn.Parameter(torch.empty(dim, dim, dtype=torch.float64))
        self.lam = nn.Parameter(torch.tensor(float(lambda_init), dtype=torch.float64))

    def branch(self, emb, norm, weight):
        hidden = torch.relu(gcn_layer(emb, norm, normalized=True))
        return gcn_layer(hidden @ weight, norm, normalized=True)

    def forward(self, med_emb: torch.Tensor) -> torch.Tensor:
        """``med_emb`` holds clinical rows only (|M| x s)."""
        if med_emb.shape[0] != self.n_medications:
            raise ValueError(f"expected {self.n_medications} medication rows, got {med_emb.shape[0]}")
        g_e = self.branch(med_emb, self.ehr_norm, self.w_ehr)
        g_d = self.branch(med_emb, self.ddi_norm, self.w_ddi)
        return g_e - self.lam * g_d

