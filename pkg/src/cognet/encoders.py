"""Set encoders for diagnoses, procedures and past medications."""
from __future__ import annotations

from torch import nn

from cognet.layers import EncoderBlock, GatedAggregation


class SetEncoder(nn.Module):
    """Transformer encoder over an unordered code set (no positional signal)."""

    def __init__(self, dim: int, heads: int, layers: int = 1):
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(dim, heads) for _ in range(layers))

    def forward(self, x, mask=None):
        for block in self.blocks:
            x = block(x, mask)
        return x


def encode_set(ids, embedding, encoder: SetEncoder, mask=None):
    """Embed ``ids`` with ``embedding`` (a table tensor) and run ``encoder``."""
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= embedding.shape[0]):
        raise IndexError(f"code id out of range for a table of {embedding.shape[0]} rows")
    return encoder(embedding[ids], mask)


def visit_condition_vectors(diag_enc, proc_enc, gate_d: GatedAggregation, gate_p: GatedAggregation,
                            diag_mask=None, proc_mask=None):
    return gate_d(diag_enc, diag_mask), gate_p(proc_enc, proc_mask)
