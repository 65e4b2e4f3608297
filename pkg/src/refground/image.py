"""Small convolutional backbone producing an S x S grid of local features."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from torch import nn

LEAKY_SLOPE = 0.1


def coord_planes(p: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Two (p, p) planes holding normalized pixel-center x and y in [0, 1]."""
    ticks = (torch.arange(p, dtype=dtype) + 0.5) / p
    yy, xx = torch.meshgrid(ticks, ticks, indexing="ij")
    return torch.stack([xx, yy])


NORMS = ("none", "batch", "group")


def _conv(c_in: int, c_out: int, stride: int, norm: str, dilation: int = 1) -> list[nn.Module]:
    """3x3 conv, optional normalization, leaky ReLU."""
    kw = dict(stride=stride, padding=dilation, dilation=dilation)
    if norm == "none":
        return [nn.Conv2d(c_in, c_out, 3, **kw), nn.LeakyReLU(LEAKY_SLOPE)]
    layer = nn.BatchNorm2d(c_out) if norm == "batch" else nn.GroupNorm(1, c_out)
    return [nn.Conv2d(c_in, c_out, 3, bias=False, **kw), layer, nn.LeakyReLU(LEAKY_SLOPE)]


class _Residual(nn.Sequential):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + super().forward(x)


class Backbone(nn.Module):
    """Stride-2 conv blocks with leaky-ReLU activations.

    Each block is ``extra_convs`` stride-1 3x3 convs followed by one stride-2
    3x3 conv, so ``len(widths)`` blocks shrink a ``p`` input to ``p / 2**len``.
    With ``coords=True`` two normalized coordinate planes are stacked onto the
    RGB input so that pooled features can still say where they came from.
    With ``cell_coords=True`` the last block emits ``widths[-1] - 2`` channels
    and the normalized cell-center ``(x, y)`` fills the final two, so an
    attention-weighted sum of features carries the attention centroid.

    ``context_convs`` residual 3x3 convs with dilations 1, 2, 4, ... run on the
    final grid so each cell can see objects anywhere in the image, which
    relational words such as "leftmost" need.
    """

    def __init__(
        self,
        widths: Sequence[int] = (16, 32, 64),
        extra_convs: int = 0,
        coords: bool = True,
        in_channels: int = 3,
        cell_coords: bool = False,
        norm: str = "none",
        context_convs: int = 0,
    ):
        super().__init__()
        if norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")
        if not widths:
            raise ValueError("backbone needs at least one block")
        if extra_convs < 0 or context_convs < 0:
            raise ValueError("extra_convs and context_convs must be >= 0")
        if cell_coords and widths[-1] < 3:
            raise ValueError("cell_coords needs at least 3 output channels")
        self.coords = coords
        self.cell_coords = cell_coords
        self.n_blocks = len(widths)
        layers: list[nn.Module] = []
        c_in = in_channels + (2 if coords else 0)
        for k, width in enumerate(widths):
            if cell_coords and k == len(widths) - 1:
                width -= 2
            for _ in range(extra_convs):
                layers += _conv(c_in, c_in, 1, norm)
            layers += _conv(c_in, width, 2, norm)
            c_in = width
        for k in range(context_convs):
            layers.append(_Residual(*_conv(c_in, c_in, 1, norm, dilation=2**k)))
        self.body = nn.Sequential(*layers)
        self.out_dim = widths[-1]

    @property
    def stride(self) -> int:
        return 2**self.n_blocks

    def grid_size(self, p: int) -> int:
        if p % self.stride:
            raise ValueError(f"image size {p} not divisible by backbone stride {self.stride}")
        return p // self.stride

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``images`` (B, 3, p, p) in [0, 1] -> features (B, S*S, D_I), row-major.

        Pixels are shifted to [-1, 1] first, so mid-gray enters as zero.
        """
        b, _, h, w = images.shape
        if h != w:
            raise ValueError(f"expected a square image, got {h}x{w}")
        self.grid_size(h)
        images = images * 2 - 1
        if self.coords:
            planes = coord_planes(h, images.dtype).expand(b, 2, h, w)
            images = torch.cat([images, planes], dim=1)
        fmap = self.body(images)
        if self.cell_coords:
            s = fmap.shape[-1]
            fmap = torch.cat([fmap, coord_planes(s, fmap.dtype).expand(b, 2, s, s)], dim=1)
        return fmap.permute(0, 2, 3, 1).reshape(b, -1, self.out_dim)


def encode_image(img: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    """Feature map (N, D_I) for a single (3, p, p) image."""
    with torch.no_grad():
        return backbone(img.unsqueeze(0))[0]


def to_tensor(array: np.ndarray) -> torch.Tensor:
    """(H, W, 3) array in [0, 1] -> (3, H, W) float tensor."""
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1))).float()


def load_png(path: str | Path, p: int) -> tuple[np.ndarray, float, float]:
    """Read an RGB image, resize to ``p x p``.

    Returns the (p, p, 3) array in [0, 1] and the x/y scale factors applied, so
    callers can map boxes into the resized frame.
    """
    with Image.open(path) as im:
        im = im.convert("RGB")
        sx, sy = p / im.width, p / im.height
        if im.size != (p, p):
            im = im.resize((p, p), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0, sx, sy
