"""Localization and attribute heads, the four training losses, and inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .geometry import BoxXYWH, GridSpec, NormalizedPrediction, clip_box, decode_box, iou
from .image import LEAKY_SLOPE, Backbone
from .interactor import AdditiveAttention, fuse
from .text import TextEncoder, TokenSequence

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    loc: float = 20.0
    conf: float = 5.0
    att: float = 1.0
    attr: float = 5.0

    def __post_init__(self) -> None:
        if min(self.as_tuple()) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.loc, self.conf, self.att, self.attr


@dataclass(frozen=True)
class AttributeVocab:
    """Attribute words with their training frequencies; weight = 1/sqrt(freq)."""

    words: tuple[str, ...]
    freqs: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.words:
            raise ValueError("attribute vocabulary is empty")
        if len(self.words) != len(self.freqs):
            raise ValueError("words and freqs differ in length")
        if min(self.freqs) < 1:
            raise ValueError("attribute frequencies must be >= 1")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / np.sqrt(np.asarray(self.freqs, dtype=np.float64))

    def labels(self, attributes: Sequence[str]) -> np.ndarray:
        present = set(attributes)
        return np.array([1.0 if w in present else 0.0 for w in self.words])

    def to_dict(self) -> dict:
        return {"words": list(self.words), "freqs": list(self.freqs)}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeVocab":
        return cls(tuple(d["words"]), tuple(int(f) for f in d["freqs"]))


class LocalizationHead(nn.Module):
    """Dense + leaky ReLU, then dense to five sigmoid outputs.

    With ``isolate_conf`` the confidence output still trains its own weights
    but its gradient stops at the hidden layer, so the self-referential
    confidence target cannot reshape the features the box is regressed from.
    Forward values are unchanged.
    """

    def __init__(self, joint_dim: int, isolate_conf: bool = False):
        super().__init__()
        self.hidden = nn.Linear(joint_dim, joint_dim)
        self.out = nn.Linear(joint_dim, 5)
        self.isolate_conf = isolate_conf

    def forward(self, joint: torch.Tensor) -> torch.Tensor:
        """(..., D_IE) -> (..., 5) as (t_x, t_y, t_w, t_h, t_c) in (0, 1)."""
        h = nn.functional.leaky_relu(self.hidden(joint), LEAKY_SLOPE)
        z = self.out(h)
        if self.isolate_conf:
            z_c = nn.functional.linear(h.detach(), self.out.weight[4:], self.out.bias[4:])
            z = torch.cat([z[..., :4], z_c], dim=-1)
        return torch.sigmoid(z)


class AttributeHead(nn.Module):
    def __init__(self, feat_dim: int, hidden: int, n_attr: int):
        super().__init__()
        self.hidden = nn.Linear(feat_dim, hidden)
        self.out = nn.Linear(hidden, n_attr)

    def forward(self, context: torch.Tensor) -> torch.Tensor:
        h = nn.functional.leaky_relu(self.hidden(context), LEAKY_SLOPE)
        return torch.sigmoid(self.out(h))


def predict_localization(joint: torch.Tensor, head: LocalizationHead) -> NormalizedPrediction:
    with torch.no_grad():
        return NormalizedPrediction.from_seq(head(joint).tolist())


def predict_attributes(context: torch.Tensor, head: AttributeHead) -> torch.Tensor:
    with torch.no_grad():
        return head(context)


# -- losses -----------------------------------------------------------------
# All take batched tensors with a leading sample axis (or none) and return the
# per-sample loss; reduction over a batch is the caller's job.


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def loss_loc(coords: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Sum of squared residuals between (t_x, t_y, t_w, t_h) and encoded targets."""
    coords = _as_tensor(coords)
    return ((coords - _as_tensor(targets, coords)) ** 2).sum(dim=-1)


def loss_conf(t_c: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of the confidence score against a 0/1 target."""
    t_c = _as_tensor(t_c)
    target = _as_tensor(target, t_c)
    return -(target * t_c.clamp_min(LOG_FLOOR).log() + (1 - target) * (1 - t_c).clamp_min(LOG_FLOOR).log())


def loss_att(alpha: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between attention weights and the one-hot center label."""
    alpha = _as_tensor(alpha)
    return -(_as_tensor(label, alpha) * alpha.clamp_min(LOG_FLOOR).log()).sum(dim=-1)


def loss_attr(probs: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Frequency-weighted multi-label BCE; exactly zero for samples with no attribute word."""
    probs = _as_tensor(probs)
    labels = _as_tensor(labels, probs)
    w = _as_tensor(weights, probs)
    bce = labels * probs.clamp_min(LOG_FLOOR).log() + (1 - labels) * (1 - probs).clamp_min(LOG_FLOOR).log()
    per_sample = -(w * bce).sum(dim=-1)
    has_attr = labels.sum(dim=-1) > 0
    return torch.where(has_attr, per_sample, torch.zeros_like(per_sample))


def total_loss(l_loc, l_conf, l_att, l_attr, weights: LossWeights):
    return weights.loc * l_loc + weights.conf * l_conf + weights.att * l_att + weights.attr * l_attr


def confidence_target(pred_box: BoxXYWH, gt: BoxXYWH, eta: float = 0.5) -> int:
    return int(iou(pred_box, gt) >= eta)


def decode_boxes(coords: torch.Tensor, p: float) -> torch.Tensor:
    """Batched decode of (..., 4) head outputs to pixel xywh."""
    return torch.stack(
        [coords[..., 0] * p, coords[..., 1] * p, coords[..., 2] ** 2 * p, coords[..., 3] ** 2 * p], dim=-1
    )


def box_iou_xywh(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    iw = torch.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])
    ih = torch.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])
    iw = torch.minimum(iw, torch.minimum(a[..., 2], b[..., 2])).clamp_min(0)
    ih = torch.minimum(ih, torch.minimum(a[..., 3], b[..., 3])).clamp_min(0)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return torch.where(union > 0, inter / union.clamp_min(LOG_FLOOR), torch.zeros_like(inter))


def confidence_targets(coords: torch.Tensor, gt_boxes: torch.Tensor, p: float, eta: float) -> torch.Tensor:
    """Batched 0/1 targets from the current prediction, with gradients blocked."""
    with torch.no_grad():
        return (box_iou_xywh(decode_boxes(coords.detach(), p), gt_boxes) >= eta).to(coords.dtype)


# -- full network -------------------------------------------------------------


class Outputs(NamedTuple):
    pred: torch.Tensor  # (B, 5)
    alpha: torch.Tensor  # (B, N)
    context: torch.Tensor  # (B, D_I)
    attr_probs: torch.Tensor | None  # (B, N_attr)


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    loc: torch.Tensor
    conf: torch.Tensor
    att: torch.Tensor
    attr: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {k: float(v) for k, v in self._asdict().items()}


class GroundingNet(nn.Module):
    """Image encoder + text encoder + attention + localization/attribute heads."""

    GROUPS = ("embedding", "recurrent", "backbone", "attention", "loc_head", "attr_head")

    def __init__(
        self,
        vocab_size: int,
        n_attr: int,
        *,
        image_size: int = 64,
        embed_dim: int = 32,
        hidden: int = 32,
        widths: Sequence[int] = (16, 32, 64),
        extra_convs: int = 0,
        coords: bool = True,
        cell_coords: bool = False,
        norm: str = "none",
        context_convs: int = 0,
        isolate_conf: bool = False,
        att_hidden: int | None = None,
        attr_hidden: int = 64,
    ):
        super().__init__()
        self.image_size = image_size
        self.text = TextEncoder(vocab_size, embed_dim, hidden)
        self.backbone = Backbone(
            widths, extra_convs=extra_convs, coords=coords, cell_coords=cell_coords, norm=norm, context_convs=context_convs
        )
        self.S = self.backbone.grid_size(image_size)
        feat_dim = self.backbone.out_dim
        self.attention = AdditiveAttention(feat_dim, self.text.out_dim, att_hidden or hidden)
        self.loc_head = LocalizationHead(feat_dim + self.text.out_dim, isolate_conf)
        self.attr_head = AttributeHead(feat_dim, attr_hidden, n_attr)
        self.backbone_frozen = False
        for mod in self.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                # He init matched to the leaky slope; biases start at zero
                nn.init.kaiming_normal_(mod.weight, a=LEAKY_SLOPE, nonlinearity="leaky_relu")
                if mod.bias is not None:
                    nn.init.zeros_(mod.bias)

    def train(self, mode: bool = True) -> "GroundingNet":
        super().train(mode)
        if self.backbone_frozen:
            # frozen means normalization statistics too
            self.backbone.eval()
        return self

    @property
    def grid(self) -> GridSpec:
        return GridSpec.from_image(self.image_size, self.S)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "embedding": list(self.text.embedding.parameters()),
            "recurrent": list(self.text.rnn.parameters()),
            "backbone": list(self.backbone.parameters()),
            "attention": list(self.attention.parameters()),
            "loc_head": list(self.loc_head.parameters()),
            "attr_head": list(self.attr_head.parameters()),
        }

    def forward(
        self,
        images: torch.Tensor,
        ids: torch.Tensor,
        with_attributes: bool = True,
        image_index: torch.Tensor | None = None,
    ) -> Outputs:
        """``image_index`` (B,) maps expressions onto rows of ``images``.

        Without it ``images`` and ``ids`` are aligned one to one. With it each
        distinct image goes through the backbone once however many
        expressions refer to it.
        """
        feats = self.backbone(images)
        if image_index is not None:
            feats = feats[image_index]
        v_e = self.text(ids)
        alpha, v_i = self.attention(feats, v_e)
        pred = self.loc_head(fuse(v_i, v_e))
        probs = self.attr_head(v_i) if with_attributes else None
        return Outputs(pred, alpha, v_i, probs)

    def losses(
        self,
        out: Outputs,
        gt_boxes: torch.Tensor,
        targets: torch.Tensor,
        centers: torch.Tensor,
        attr_labels: torch.Tensor,
        attr_weights: torch.Tensor,
        weights: LossWeights,
        eta: float = 0.5,
    ) -> LossBreakdown:
        """Batch-mean loss terms.

        ``gt_boxes`` (B, 4) pixel xywh, ``targets`` (B, 4) encoded boxes,
        ``centers`` (B,) row-major center-cell indices, ``attr_labels`` (B, N_attr).
        """
        coords, t_c = out.pred[:, :4], out.pred[:, 4]
        conf_t = confidence_targets(coords, gt_boxes, self.image_size, eta)
        label = nn.functional.one_hot(centers, out.alpha.shape[-1]).to(out.alpha.dtype)
        l_loc = loss_loc(coords, targets).mean()
        l_conf = loss_conf(t_c, conf_t).mean()
        l_att = loss_att(out.alpha, label).mean()
        l_attr = loss_attr(out.attr_probs, attr_labels, attr_weights).mean()
        return LossBreakdown(total_loss(l_loc, l_conf, l_att, l_attr, weights), l_loc, l_conf, l_att, l_attr)

    @torch.no_grad()
    def predict_boxes(
        self, images: torch.Tensor, ids: torch.Tensor, image_index: torch.Tensor | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Clipped pixel boxes (B, 4) and confidences (B,) for a batch."""
        pred = self.forward(images, ids, with_attributes=False, image_index=image_index).pred
        boxes = decode_boxes(pred[:, :4], self.image_size).double().numpy()
        p = float(self.image_size)
        x0 = np.clip(boxes[:, 0], 0, p)
        y0 = np.clip(boxes[:, 1], 0, p)
        x1 = np.clip(boxes[:, 0] + boxes[:, 2], 0, p)
        y1 = np.clip(boxes[:, 1] + boxes[:, 3], 0, p)
        return np.stack([x0, y0, x1 - x0, y1 - y0], axis=1), pred[:, 4].double().numpy()


@torch.no_grad()
def ground(image: torch.Tensor, expr: TokenSequence | Sequence[int], model: GroundingNet) -> tuple[BoxXYWH, float]:
    """Single-stage inference for one (3, p, p) image and one padded expression.

    Only the localization path runs; the attribute head and all losses are skipped.
    """
    ids = expr.ids if isinstance(expr, TokenSequence) else tuple(expr)
    ids_t = torch.tensor([ids], dtype=torch.long)
    img = image.unsqueeze(0).to(next(model.parameters()).dtype)
    pred = model(img, ids_t, with_attributes=False).pred[0].tolist()
    box = decode_box(NormalizedPrediction.from_seq(pred), model.grid)
    return clip_box(box, model.image_size, model.image_size), pred[4]


def attribute_topk(probs: torch.Tensor, vocab: AttributeVocab, k: int = 5) -> list[tuple[str, float]]:
    vals = probs.detach().double().flatten().tolist()
    order = sorted(range(len(vals)), key=lambda i: (-vals[i], vocab.words[i]))[:k]
    return [(vocab.words[i], vals[i]) for i in order]
