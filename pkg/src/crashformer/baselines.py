"""Sequential-only baseline classifiers.

Both models consume the (B, K, 27) history and nothing else, so their
outputs are independent of tiles and demographics by construction.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ValidationError
from .model import N_CLASSES, series_decompose


class DLinearClassifier(nn.Module):
    """Decompose the history, apply one linear map to the flattened
    seasonal part and one to the trend part, sum, and project to logits."""

    def __init__(self, seq_len: int, n_features: int = 27, hidden: int = 32,
                 decomp_kernel: int = 3):
        super().__init__()
        self.seq_len = seq_len
        self.n_features = n_features
        self.kernel = decomp_kernel
        flat = seq_len * n_features
        self.seasonal = nn.Linear(flat, hidden)
        self.trend = nn.Linear(flat, hidden)
        self.head = nn.Linear(hidden, N_CLASSES)

    def forward(self, history: torch.Tensor) -> torch.Tensor:
        if history.shape[1:] != (self.seq_len, self.n_features):
            raise ValidationError(f"expected history (B, {self.seq_len}, "
                                  f"{self.n_features}), got {tuple(history.shape)}")
        seasonal, trend = series_decompose(history, self.kernel)
        h = self.seasonal(seasonal.flatten(1)) + self.trend(trend.flatten(1))
        return self.head(h)


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(4 * d_model, d_model),
        )
        self.norm2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attn_out, attn_weights = self.attn(x, x, x, need_weights=True,
                                           average_attn_weights=True)
        x = self.norm1(x + self.drop(attn_out))
        x = self.norm2(x + self.drop(self.ff(x)))
        return x, attn_weights


class VanillaTransformerClassifier(nn.Module):
    """Full-attention baseline: two encoder layers over the history plus a
    single decoder layer in which one learned query token cross-attends to
    the encoded sequence; its output feeds the logit head."""

    def __init__(self, seq_len: int, n_features: int = 27, d_model: int = 32,
                 n_heads: int = 4, dropout: float = 0.1):
        super().__init__()
        self.seq_len = seq_len
        self.n_features = n_features
        self.embed = nn.Linear(n_features, d_model)
        self.pos = nn.Parameter(0.02 * torch.randn(1, seq_len, d_model))
        self.enc1 = EncoderLayer(d_model, n_heads, dropout)
        self.enc2 = EncoderLayer(d_model, n_heads, dropout)
        self.query = nn.Parameter(0.02 * torch.randn(1, 1, d_model))
        self.cross = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.dec_norm = nn.LayerNorm(d_model)
        self.dec_ff = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model),
        )
        self.head = nn.Linear(d_model, N_CLASSES)

    def forward(self, history: torch.Tensor) -> torch.Tensor:
        logits, _ = self.forward_with_attention(history)
        return logits

    def forward_with_attention(self, history: torch.Tensor):
        if history.shape[1:] != (self.seq_len, self.n_features):
            raise ValidationError(f"expected history (B, {self.seq_len}, "
                                  f"{self.n_features}), got {tuple(history.shape)}")
        x = self.embed(history) + self.pos
        x, attn1 = self.enc1(x)
        x, attn2 = self.enc2(x)
        q = self.query.expand(x.shape[0], -1, -1)
        dec, cross_attn = self.cross(q, x, x, need_weights=True, average_attn_weights=True)
        dec = self.dec_norm(dec + self.dec_ff(dec))
        return self.head(dec.squeeze(1)), (attn1, attn2, cross_attn)
