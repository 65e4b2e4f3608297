"""SGD with momentum, referent batching, early stopping, and gradient checking."""
from __future__ import annotations

import copy
import csv
import logging
import math
import random
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .data import DatasetManifest, ReferringSample, sample_image
from .geometry import BoxXYWH, GridSpec, center_cell, encode_box
from .grounder import AttributeVocab, GroundingNet, LossBreakdown, LossWeights
from .text import Vocabulary, encode_expression

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "loss_total", "loss_loc", "loss_conf", "loss_att", "loss_attr", "val_acc")


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class LRSchedule:
    initial: float = 1e-3
    decay: float = 0.8
    every: int = 5

    def rate(self, epoch: int) -> float:
        return self.initial * self.decay ** (epoch // self.every)


class SGDMomentum:
    """``v <- mu * v - lr * g``; ``w <- w + v``. Parameters without grads are left alone."""

    def __init__(self, params: Iterable[torch.nn.Parameter], lr: float = 1e-3, momentum: float = 0.9):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.momentum = momentum
        self.velocity = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        live = [(p, v) for p, v in zip(self.params, self.velocity) if p.grad is not None]
        if not live:
            return
        params, vel = (list(x) for x in zip(*live))
        # multi-tensor ops: same arithmetic as a per-tensor loop, less dispatch
        torch._foreach_mul_(vel, self.momentum)
        torch._foreach_add_(vel, [p.grad for p in params], alpha=-self.lr)
        torch._foreach_add_(params, vel)


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: LRSchedule = field(default_factory=LRSchedule)
    momentum: float = 0.9
    patience: int = 10
    max_epochs: int = 100
    # wall-clock cap in seconds; 0 disables it
    time_budget: float = 0.0
    seed: int = 0
    freeze_backbone: bool = False
    eta: float = 0.5

    def __post_init__(self) -> None:
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class EncodedSet:
    """Tensors for a list of samples, aligned by position."""

    samples: list[ReferringSample]
    images: torch.Tensor  # (M, 3, p, p) unique images
    image_index: torch.Tensor  # (n,) row into images
    ids: torch.Tensor  # (n, T)
    boxes: torch.Tensor  # (n, 4) pixel xywh in model frame
    targets: torch.Tensor  # (n, 4)
    centers: torch.Tensor  # (n,)
    attr_labels: torch.Tensor  # (n, N_attr)

    def __len__(self) -> int:
        return len(self.samples)

    def batch(self, rows: Sequence[int]) -> dict[str, torch.Tensor]:
        idx = torch.as_tensor(rows, dtype=torch.long)
        uniq, inverse = torch.unique(self.image_index[idx], return_inverse=True)
        return {
            "images": self.images[uniq],
            "image_index": inverse,
            "ids": self.ids[idx],
            "boxes": self.boxes[idx],
            "targets": self.targets[idx],
            "centers": self.centers[idx],
            "attr_labels": self.attr_labels[idx],
        }

    def to(self, dtype: torch.dtype) -> "EncodedSet":
        return EncodedSet(
            self.samples, self.images.to(dtype), self.image_index, self.ids,
            self.boxes.to(dtype), self.targets.to(dtype), self.centers, self.attr_labels.to(dtype),
        )


def encode_samples(
    samples: Sequence[ReferringSample],
    vocab: Vocabulary,
    attr_vocab: AttributeVocab,
    grid: GridSpec,
    t_max: int = 15,
    image_root: str | Path | None = None,
) -> EncodedSet:
    p = int(grid.p_w)
    images: list[np.ndarray] = []
    seen: dict[str, int] = {}
    index, boxes = [], []
    for s in samples:
        key = s.image_key
        img, box = None, None
        if key not in seen:
            img, box = sample_image(s, p, image_root)
            seen[key] = len(images)
            images.append(img)
        else:
            box = sample_image_box(s, p)
        index.append(seen[key])
        boxes.append(box)
    stack = np.stack(images).transpose(0, 3, 1, 2) if images else np.zeros((0, 3, p, p), np.float32)
    return EncodedSet(
        samples=list(samples),
        images=torch.from_numpy(np.ascontiguousarray(stack)).float(),
        image_index=torch.tensor(index, dtype=torch.long),
        ids=torch.tensor([encode_expression(s.expression, vocab, t_max).ids for s in samples], dtype=torch.long).reshape(-1, t_max),
        boxes=torch.tensor([b.to_list() for b in boxes], dtype=torch.float32).reshape(-1, 4),
        targets=torch.tensor([encode_box(b, grid) for b in boxes], dtype=torch.float32).reshape(-1, 4),
        centers=torch.tensor([_cell_index(b, grid) for b in boxes], dtype=torch.long),
        attr_labels=torch.tensor(np.array([attr_vocab.labels(s.attributes) for s in samples]), dtype=torch.float32).reshape(-1, len(attr_vocab)),
    )


def sample_image_box(sample: ReferringSample, p: int) -> BoxXYWH:
    """Box in the model frame without decoding the image again."""
    if sample.width == p and sample.height == p:
        return sample.bbox
    sx, sy = p / sample.width, p / sample.height
    b = sample.bbox
    return BoxXYWH(b.x * sx, b.y * sy, b.w * sx, b.h * sy)


def _cell_index(box: BoxXYWH, grid: GridSpec) -> int:
    col, row = center_cell(box, grid)
    return row * grid.S + col


def make_batches(samples: Sequence[ReferringSample], rng: random.Random | None = None) -> list[list[int]]:
    """Group sample positions by referent (same image and box); shuffle if ``rng`` given."""
    groups: dict[tuple, list[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        groups[s.referent_key].append(i)
    batches = list(groups.values())
    if rng is not None:
        rng.shuffle(batches)
    return batches


def train_step(
    model: GroundingNet,
    batch: dict[str, torch.Tensor],
    opt: SGDMomentum,
    weights: LossWeights,
    attr_weights: torch.Tensor,
    eta: float = 0.5,
) -> LossBreakdown:
    """One forward/backward pass over a referent batch (mean reduction) and one update."""
    out = model(batch["images"], batch["ids"], image_index=batch.get("image_index"))
    losses = model.losses(
        out, batch["boxes"], batch["targets"], batch["centers"], batch["attr_labels"], attr_weights, weights, eta
    )
    # components first so the message names the term that broke
    for name in ("loc", "conf", "att", "attr", "total"):
        value = getattr(losses, name)
        if not torch.isfinite(value):
            raise NumericalError(f"non-finite {name} loss: {float(value)}")
    opt.zero_grad()
    losses.total.backward()
    opt.step()
    return LossBreakdown(*(v.detach() for v in losses))


@torch.no_grad()
def predict_set(model: GroundingNet, data: EncodedSet, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(data), batch_size):
        rows = list(range(start, min(start + batch_size, len(data))))
        b = data.batch(rows)
        boxes, _ = model.predict_boxes(b["images"], b["ids"], b["image_index"])
        out.append(boxes)
    model.train()
    return np.concatenate(out) if out else np.zeros((0, 4))


def set_backbone_frozen(model: GroundingNet, frozen: bool) -> None:
    model.backbone_frozen = frozen
    for p in model.backbone.parameters():
        p.requires_grad_(not frozen)
    model.train(model.training)


@dataclass
class FitResult:
    model: GroundingNet
    log: list[dict[str, float]]
    best_epoch: int
    best_val_acc: float
    stopped_early: bool


def fit(
    model: GroundingNet,
    train: EncodedSet,
    val: EncodedSet,
    attr_vocab: AttributeVocab,
    config: TrainConfig,
    on_epoch: Callable[[dict[str, float]], None] | None = None,
) -> FitResult:
    """Train until ``patience`` epochs pass without a better validation accuracy.

    Returns the model restored to its best-validation parameters.
    """
    from .evaluation import accuracy_at_iou

    if len(train) == 0 or len(val) == 0:
        raise ValueError("fit needs non-empty train and val splits")
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    set_backbone_frozen(model, config.freeze_backbone)
    opt = SGDMomentum(model.parameters(), config.schedule.initial, config.momentum)
    attr_w = torch.as_tensor(attr_vocab.weights, dtype=train.images.dtype)
    val_gt = val.boxes.double().numpy()

    best_acc, best_epoch, best_state = -math.inf, -1, None
    history: list[dict[str, float]] = []
    started = time.monotonic()
    stopped_early = False
    for epoch in range(config.max_epochs):
        opt.lr = config.schedule.rate(epoch)
        sums = defaultdict(float)
        batches = make_batches(train.samples, rng)
        for rows in batches:
            losses = train_step(model, train.batch(rows), opt, config.weights, attr_w, config.eta)
            for k, v in losses.floats().items():
                sums[k] += v
        val_acc = accuracy_at_iou(predict_set(model, val), val_gt, config.eta).accuracy
        row = {"epoch": epoch, "lr": opt.lr, "val_acc": val_acc}
        row.update({f"loss_{k}": sums[k] / len(batches) for k in ("total", "loc", "conf", "att", "attr")})
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f val_acc %.4f", epoch, opt.lr, row["loss_total"], val_acc)
        if on_epoch:
            on_epoch(row)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= config.patience:
            stopped_early = True
            break
        if config.time_budget and time.monotonic() - started > config.time_budget:
            log.info("time budget reached after epoch %d", epoch)
            break
    model.load_state_dict(best_state)
    return FitResult(model, history, best_epoch, best_acc, stopped_early)


def write_log(rows: Sequence[dict[str, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


# -- gradient checking ----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    per_group: dict[str, float]
    nonfinite: list[str]

    @property
    def ok(self) -> bool:
        return not self.nonfinite


def rel_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    Central differences at eps=1e-5 carry roughly ``2**-52 * |L| / eps`` of
    cancellation noise (about 4e-10 at |L| ~ 16), so coordinates below the
    floor are in effect held to an absolute tolerance of ``floor * 1e-4``.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, Sequence[torch.Tensor]] | Sequence[torch.Tensor],
    eps: float = 1e-5,
    max_per_tensor: int | None = None,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn`` with central differences.

    ``params`` may be grouped by name. With ``max_per_tensor`` a random subset
    of coordinates is checked in each tensor; otherwise every coordinate is.
    Run in float64.
    """
    groups = params if isinstance(params, dict) else {"params": list(params)}
    all_params = [p for ps in groups.values() for p in ps]
    for p in all_params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, all_params, allow_unused=True)
    grads = {id(p): (g if g is not None else torch.zeros_like(p)) for p, g in zip(all_params, analytic)}

    gen = np.random.default_rng(seed)
    worst, count = 0.0, 0
    per_group: dict[str, float] = {}
    bad: list[str] = []
    with torch.no_grad():
        for name, ps in groups.items():
            gmax = 0.0
            for t_no, p in enumerate(ps):
                flat = p.view(-1)
                coords = np.arange(flat.numel())
                if max_per_tensor is not None and flat.numel() > max_per_tensor:
                    coords = gen.choice(flat.numel(), max_per_tensor, replace=False)
                g = grads[id(p)].reshape(-1)
                for c in coords:
                    orig = flat[c].item()
                    flat[c] = orig + eps
                    f_plus = float(loss_fn())
                    flat[c] = orig - eps
                    f_minus = float(loss_fn())
                    flat[c] = orig
                    numeric = (f_plus - f_minus) / (2 * eps)
                    a = float(g[c])
                    if not (math.isfinite(numeric) and math.isfinite(a)):
                        bad.append(f"{name}[{t_no}][{int(c)}]")
                        continue
                    err = rel_error(a, numeric, floor)
                    gmax = max(gmax, err)
                    count += 1
            per_group[name] = gmax
            worst = max(worst, gmax)
    return GradCheckReport(worst, count, per_group, bad)
