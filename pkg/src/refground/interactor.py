"""Text-conditioned soft attention over the feature grid."""
from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from PIL import Image
from torch import nn


class AttentionResult(NamedTuple):
    weights: torch.Tensor  # (..., N)
    context: torch.Tensor  # (..., D_I)


class AdditiveAttention(nn.Module):
    """``score_i = u . tanh(W_s s_i + W_v v_E)``, one scalar per grid cell."""

    def __init__(self, feat_dim: int, text_dim: int, hidden: int):
        super().__init__()
        self.w_s = nn.Linear(feat_dim, hidden, bias=False)
        self.w_v = nn.Linear(text_dim, hidden, bias=False)
        self.u = nn.Linear(hidden, 1, bias=False)

    def scores(self, feats: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        """``feats`` (B, N, D_I), ``text`` (B, D_E) -> (B, N)."""
        joint = torch.tanh(self.w_s(feats) + self.w_v(text).unsqueeze(-2))
        return self.u(joint).squeeze(-1)

    def forward(self, feats: torch.Tensor, text: torch.Tensor) -> AttentionResult:
        alpha = softmax(self.scores(feats, text))
        context = torch.einsum("...n,...nd->...d", alpha, feats)
        return AttentionResult(alpha, context)


def softmax(scores: torch.Tensor) -> torch.Tensor:
    shifted = scores - scores.max(dim=-1, keepdim=True).values.detach()
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def attention_scores(feats: torch.Tensor, text: torch.Tensor, att: AdditiveAttention) -> torch.Tensor:
    return att.scores(feats, text)


def attend(feats: torch.Tensor, text: torch.Tensor, att: AdditiveAttention) -> AttentionResult:
    return att(feats, text)


def fuse(context: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """Joint feature ``[v_I ; v_E]``."""
    return torch.cat([context, text], dim=-1)


def heatmap_grid(weights: torch.Tensor | np.ndarray) -> np.ndarray:
    """Reshape N attention weights into their S x S grid."""
    w = np.asarray(weights.detach().cpu() if isinstance(weights, torch.Tensor) else weights, dtype=np.float64)
    s = int(round(np.sqrt(w.size)))
    if s * s != w.size:
        raise ValueError(f"{w.size} weights do not form a square grid")
    return w.reshape(s, s)


def save_heatmap(weights: torch.Tensor | np.ndarray, path: str | Path, cell_px: int = 8) -> np.ndarray:
    """Write attention as a grayscale PNG (max weight -> white); returns the grid."""
    grid = heatmap_grid(weights)
    top = grid.max()
    scaled = grid / top if top > 0 else grid
    pixels = np.kron(np.round(scaled * 255).astype(np.uint8), np.ones((cell_px, cell_px), dtype=np.uint8))
    Image.fromarray(pixels, mode="L").save(path)
    return grid
