"""IoU accuracy, latency benchmarking, and the loss-ablation table."""
from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .geometry import iou_many
from .grounder import LossWeights

# (label, weights) rows in the order the loss terms are added
ABLATION_ROWS: tuple[tuple[str, LossWeights], ...] = (
    ("loc", LossWeights(20.0, 0.0, 0.0, 0.0)),
    ("loc+conf", LossWeights(20.0, 5.0, 0.0, 0.0)),
    ("loc+conf+att", LossWeights(20.0, 5.0, 1.0, 0.0)),
    ("loc+conf+att+attr", LossWeights(20.0, 5.0, 1.0, 5.0)),
)


@dataclass
class EvalReport:
    split: str
    count: int
    eta: float
    accuracy: float
    ious: list[float]
    mean_iou: float

    def to_dict(self) -> dict:
        return asdict(self)


def accuracy_at_iou(pred_boxes, gt_boxes, eta: float = 0.5, split: str = "test") -> EvalReport:
    """Fraction of predictions with IoU >= ``eta`` against their ground truth."""
    pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth boxes")
    ious = iou_many(pred, gt)
    n = len(ious)
    hits = int(np.count_nonzero(ious >= eta))
    return EvalReport(
        split=split,
        count=n,
        eta=eta,
        accuracy=hits / n if n else 0.0,
        ious=ious.tolist(),
        mean_iou=float(ious.mean()) if n else 0.0,
    )


@dataclass
class BenchReport:
    warmup: int
    measured: int
    latencies: list[float]
    mean: float
    median: float
    referents_per_second: float

    @classmethod
    def from_latencies(cls, latencies: Sequence[float], warmup: int = 0) -> "BenchReport":
        lat = [float(x) for x in latencies]
        if not lat:
            raise ValueError("no latencies recorded")
        mean = statistics.fmean(lat)
        return cls(warmup, len(lat), lat, mean, statistics.median(lat), 1.0 / mean)

    def headline(self) -> str:
        """e.g. ``0.025 s per referent (40.0 referents/s)``."""
        return f"{self.mean:.3f} s per referent ({self.referents_per_second:.1f} referents/s)"

    def to_dict(self) -> dict:
        return asdict(self)


def latency_bench(
    ground_fn: Callable[..., object],
    stream: Iterable[tuple],
    warmup: int = 5,
    n: int = 100,
) -> BenchReport:
    """Time ``ground_fn(*item)`` on ``n`` items after ``warmup`` discarded calls.

    Items are pre-loaded tensors, so decode from disk is excluded. Torch is
    pinned to one thread for the duration.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        it = iter(stream)
        for _ in range(warmup):
            ground_fn(*next(it))
        lat = []
        for _ in range(n):
            item = next(it)
            t0 = time.perf_counter()
            ground_fn(*item)
            lat.append(time.perf_counter() - t0)
    finally:
        torch.set_num_threads(threads)
    return BenchReport.from_latencies(lat, warmup)


def render_table(headers: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    """Aligned plain-text table with a rule under the header."""
    cells = [[str(h) for h in headers]] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
    lines = [fmt(cells[0]), "-+-".join("-" * w for w in widths)]
    lines += [fmt(r) for r in cells[1:]]
    return "\n".join(lines)


@dataclass
class AblationRow:
    line: int
    name: str
    weights: LossWeights
    accuracy: float
    best_epoch: int


def ablation_table(
    train_and_eval: Callable[[LossWeights], tuple[float, int]],
    rows: Sequence[tuple[str, LossWeights]] = ABLATION_ROWS,
) -> list[AblationRow]:
    """Train one model per loss configuration and collect test accuracy.

    ``train_and_eval`` must seed itself identically for every call so rows
    differ only by their loss weights.
    """
    out = []
    for line, (name, weights) in enumerate(rows, start=1):
        acc, best_epoch = train_and_eval(weights)
        out.append(AblationRow(line, name, weights, acc, best_epoch))
    return out


def render_ablation(rows: Sequence[AblationRow]) -> str:
    return render_table(
        ["Line", "Model", "lambda (loc, conf, att, attr)", "Acc%"],
        [
            [r.line, f"grounder ({r.name})", "(" + ", ".join(f"{w:g}" for w in r.weights.as_tuple()) + ")", f"{100 * r.accuracy:.2f}"]
            for r in rows
        ],
    )
