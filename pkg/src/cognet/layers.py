"""Attention, feed-forward, layer-norm and gated-aggregation building blocks.

All layers work on batched tensors ``(..., L, s)``.  Boolean masks are
``True`` where a position may be attended to.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

MASK_FILL = -1e9
LN_EPS = 1e-5
FFN_EXPANSION = 8


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    gate_dim: int = 32
    max_len: int = 45
    beam_width: int = 4
    encoder_layers: int = 1
    dropout: float = 0.0
    lambda_init: float = 0.1
    init_seed: int = 1203
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("dim", "heads", "gate_dim", "max_len", "beam_width", "encoder_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def to_dict(self):
        return asdict(self)


def masked_softmax(logits: torch.Tensor, mask=None, dim: int = -1) -> torch.Tensor:
    if mask is None:
        return torch.softmax(logits, dim=dim)
    return torch.softmax(logits.masked_fill(~mask, MASK_FILL), dim=dim)


def attention(q, k, v, mask=None, scale=None):
    """Softmax(Q K^T * scale) V, with ``scale`` defaulting to 1/sqrt(q.shape[-1])."""
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"keys ({k.shape[-2]}) and values ({v.shape[-2]}) differ in length")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(-2, -1)) * scale
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool).expand_as(scores)
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("attention mask leaves a query with no visible key")
    weights = masked_softmax(scores, mask)
    return weights @ v, weights


def uniform_(tensor, bound, generator):
    with torch.no_grad():
        return tensor.uniform_(-bound, bound, generator=generator)


class MultiHeadAttention(nn.Module):
    """[head_1; ...; head_h] W_O with head_i = Attention(Q W_Q_i, K W_K_i, V W_V_i).

    The per-head projections are column blocks of ``w_q``/``w_k``/``w_v``.
    Scores are scaled by 1/sqrt(model dim), not by the head width.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.dim, self.heads = dim, heads
        self.w_q = nn.Parameter(torch.empty(dim, dim, dtype=torch.float64))
        self.w_k = nn.Parameter(torch.empty(dim, dim, dtype=torch.float64))
        self.w_v = nn.Parameter(torch.empty(dim, dim, dtype=torch.float64))
        self.w_o = nn.Parameter(torch.empty(dim, dim, dtype=torch.float64))

    def head_weights(self, i):
        w = self.dim // self.heads
        cols = slice(i * w, (i + 1) * w)
        return self.w_q[:, cols], self.w_k[:, cols], self.w_v[:, cols]

    def _split(self, x):
        *lead, length, _ = x.shape
        return x.reshape(*lead, length, self.heads, self.dim // self.heads).transpose(-3, -2)

    def forward(self, q, k, v, mask=None):
        qh, kh, vh = self._split(q @ self.w_q), self._split(k @ self.w_k), self._split(v @ self.w_v)
        if mask is not None:
            mask = mask.unsqueeze(-3)  # broadcast over heads
        out, _ = attention(qh, kh, vh, mask, scale=1.0 / math.sqrt(self.dim))
        out = out.transpose(-3, -2)
        return out.reshape(*out.shape[:-2], self.dim) @ self.w_o


class FeedForward(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        hidden = FFN_EXPANSION * dim
        self.w1 = nn.Parameter(torch.empty(dim, hidden, dtype=torch.float64))
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=torch.float64))
        self.w2 = nn.Parameter(torch.empty(hidden, dim, dtype=torch.float64))
        self.b2 = nn.Parameter(torch.zeros(dim, dtype=torch.float64))

    def forward(self, h):
        return torch.relu(h @ self.w1 + self.b1) @ self.w2 + self.b2


class ResidualNorm(nn.Module):
    """LayerNorm(x + sublayer_out) with a learned per-dimension scale and shift."""

    def __init__(self, dim: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(dim, dtype=torch.float64))
        self.shift = nn.Parameter(torch.zeros(dim, dtype=torch.float64))

    def forward(self, x, sublayer_out):
        return layer_norm_residual(x, sublayer_out, self.scale, self.shift)


def layer_norm_residual(x, sublayer_out, scale, shift, eps=LN_EPS):
    if x.shape != sublayer_out.shape:
        raise ValueError(f"residual shape mismatch {tuple(x.shape)} vs {tuple(sublayer_out.shape)}")
    return F.layer_norm(x + sublayer_out, (x.shape[-1],), scale, shift, eps)


class GatedAggregation(nn.Module):
    """Softmax_L(tanh(X W1 + b1) W2 + b2)^T X  ->  one s-vector per set."""

    def __init__(self, dim: int, gate_dim: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(dim, gate_dim, dtype=torch.float64))
        self.b1 = nn.Parameter(torch.zeros(gate_dim, dtype=torch.float64))
        self.w2 = nn.Parameter(torch.empty(gate_dim, 1, dtype=torch.float64))
        self.b2 = nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, x, mask=None):
        if x.shape[-2] == 0:
            raise ValueError("cannot aggregate an empty set")
        logits = (torch.tanh(x @ self.w1 + self.b1) @ self.w2).squeeze(-1) + self.b2
        weights = masked_softmax(logits, mask)
        return (weights.unsqueeze(-1) * x).sum(dim=-2)


class EncoderBlock(nn.Module):
    """H = LN(X + MH(X, X, X)); out = LN(H + FFN(H))."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm1 = ResidualNorm(dim)
        self.ffn = FeedForward(dim)
        self.norm2 = ResidualNorm(dim)

    def forward(self, x, key_mask=None):
        mask = None if key_mask is None else key_mask.unsqueeze(-2)
        h = self.norm1(x, self.attn(x, x, x, mask))
        return self.norm2(h, self.ffn(h))


def init_parameters(module: nn.Module, dim: int, seed: int):
    """Uniform(+-1/sqrt(dim)) for matrices and embeddings, zeros for biases.

    Layer-norm scales start at one and the graph fusion weight keeps its value.
    """
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(dim)
    for name, param in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("scale",):
            with torch.no_grad():
                param.fill_(1.0)
        elif leaf in ("lam",):
            continue
        elif param.dim() >= 2:
            uniform_(param, bound, gen)
        else:
            with torch.no_grad():
                param.zero_()
