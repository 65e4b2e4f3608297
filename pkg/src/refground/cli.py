"""Command-line entry point: ``refground <command> [--config FILE] [--section.key value ...]``.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numerical failure.
Run directories live under ``$REFGROUND_RUNS`` (default ``./runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__, pipeline
from .config import ConfigError, RunConfig, load
from .data import ManifestError, SceneGenerationError, export_manifest, import_refcoco_style
from .evaluation import ABLATION_ROWS, ablation_table, latency_bench, render_ablation
from .geometry import BoxXYWH, iou
from .grounder import attribute_topk, ground
from .image import load_png, to_tensor
from .interactor import save_heatmap
from .text import encode_expression
from .training import NumericalError, grad_check, write_log

log = logging.getLogger("refground")

RUNS_ENV = "REFGROUND_RUNS"
EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        raise UsageError(f"{self.prog}: {message}")


def _split_overrides(extra: Sequence[str]) -> dict[str, str]:
    """Turn leftover ``--section.key value`` / ``--section.key=value`` tokens into a dict."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            value = extra[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def make_run_dir(command: str, cfg: RunConfig, out: str | None) -> Path:
    """Create the run directory and record the resolved config, its hash and the seed."""
    path = Path(out) if out else runs_root() / f"{command}-{cfg.hash()}"
    path.mkdir(parents=True, exist_ok=True)
    cfg.save(path / "config.toml")
    meta = {"command": command, "config_hash": cfg.hash(), "seed": cfg.run.seed, "version": __version__}
    (path / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    if args.seed is not None:
        cfg.run.seed = args.seed
    manifest = pipeline.load_manifest(cfg.validate()) if not cfg.data.manifest else None
    if manifest is None:
        raise ConfigError("gen-data generates synthetic data; unset data.manifest")
    run = make_run_dir("gen-data", cfg, args.out)
    path = run / "manifest.jsonl"
    export_manifest(manifest, path)
    print(json.dumps({"manifest": str(path), "samples": len(manifest), "config_hash": cfg.hash()}))
    return EXIT_OK


def cmd_import(args, cfg: RunConfig) -> int:
    manifest = import_refcoco_style(args.input)
    run = make_run_dir("import-refcoco", cfg, args.out)
    path = run / "manifest.jsonl"
    export_manifest(manifest, path)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(json.dumps({"manifest": str(path), "counts": counts, "rejected": manifest.rejected, "config_hash": cfg.hash()}))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    run = make_run_dir("train", cfg, args.out)
    data = pipeline.prepare(cfg)
    result = pipeline.train(cfg, data)
    write_log(result.log, run / "train_log.csv")
    pipeline.save_checkpoint(run / "model.pt", result.model, cfg, data.vocab, data.attr_vocab)
    report = pipeline.evaluate(result.model, data.test, cfg.train.eta)
    metrics = {
        "config_hash": cfg.hash(),
        "best_epoch": result.best_epoch,
        "best_val_acc": result.best_val_acc,
        "epochs_run": len(result.log),
        "stopped_early": result.stopped_early,
        "test_acc": report.accuracy,
        "test_mean_iou": report.mean_iou,
    }
    _write_json(run / "metrics.json", metrics)
    print(json.dumps({"run": str(run), **metrics}))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model, ckpt_cfg, vocab, attr_vocab = pipeline.load_checkpoint(args.checkpoint)
    # data settings may be overridden (e.g. another manifest); the model comes from the checkpoint
    ckpt_cfg.data = cfg.data
    manifest = pipeline.load_manifest(ckpt_cfg)
    from .training import encode_samples

    samples = manifest.split(args.split)
    if not samples:
        raise ConfigError(f"split {args.split!r} is empty")
    data = encode_samples(samples, vocab, attr_vocab, model.grid, ckpt_cfg.model.t_max, ckpt_cfg.data.image_root or None)
    report = pipeline.evaluate(model, data, ckpt_cfg.train.eta, args.split)
    run = make_run_dir("eval", ckpt_cfg, args.out)
    payload = {"config_hash": ckpt_cfg.hash(), **report.to_dict()}
    _write_json(run / f"eval_{args.split}.json", payload)
    summary = {k: payload[k] for k in ("split", "count", "eta", "accuracy", "mean_iou", "config_hash")}
    print(json.dumps(summary))
    return EXIT_OK


def _parse_box(text: str) -> BoxXYWH:
    try:
        vals = [float(v) for v in text.split(",")]
        return BoxXYWH.from_seq(vals)
    except ValueError as err:
        raise ConfigError(f"--gt expects x,y,w,h: {err}") from None


def cmd_predict(args, cfg: RunConfig) -> int:
    model, ckpt_cfg, vocab, attr_vocab = pipeline.load_checkpoint(args.checkpoint)
    p = model.image_size
    if not Path(args.image).is_file():
        raise ConfigError(f"image not found: {args.image}")
    array, sx, sy = load_png(args.image, p)
    image = to_tensor(array)
    seq = encode_expression(args.expr, vocab, ckpt_cfg.model.t_max)
    box, conf = ground(image, seq, model)
    # back to the input image's pixel frame
    box = BoxXYWH(box.x / sx, box.y / sy, box.w / sx, box.h / sy)
    record: dict = {
        "id": args.id or Path(args.image).stem,
        "box": [round(v, 4) for v in box.to_list()],
        "confidence": round(conf, 6),
        "config_hash": ckpt_cfg.hash(),
    }
    if args.gt:
        record["iou"] = round(iou(box, _parse_box(args.gt)), 6)
    if args.heatmap or args.topk:
        with torch.no_grad():
            out = model(image.unsqueeze(0), torch.tensor([seq.ids]), with_attributes=bool(args.topk))
        if args.heatmap:
            save_heatmap(out.alpha[0], args.heatmap)
            record["heatmap"] = str(args.heatmap)
        if args.topk:
            record["attributes"] = [[w, round(pr, 6)] for w, pr in attribute_topk(out.attr_probs[0], attr_vocab, args.topk)]
    print(json.dumps(record))
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    model, ckpt_cfg, vocab, _ = pipeline.load_checkpoint(args.checkpoint)
    ckpt_cfg.data = cfg.data
    manifest = pipeline.load_manifest(ckpt_cfg)
    samples = manifest.split("test") or manifest.samples
    if not samples:
        raise ConfigError("no samples to benchmark")
    from .data import sample_image

    root = ckpt_cfg.data.image_root or None
    # decode outside the timed region
    need = args.warmup + args.n
    items = []
    for i in range(need):
        s = samples[i % len(samples)]
        img, _ = sample_image(s, model.image_size, root)
        items.append((to_tensor(img), encode_expression(s.expression, vocab, ckpt_cfg.model.t_max), model))
    report = latency_bench(ground, items, args.warmup, args.n)
    run = make_run_dir("bench", ckpt_cfg, args.out)
    _write_json(run / "bench.json", {"config_hash": ckpt_cfg.hash(), **report.to_dict()})
    print(report.headline())
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    """Finite-difference check of the full weighted objective on a tiny float64 model."""
    from .geometry import GridSpec, center_cell, encode_box
    from .grounder import GroundingNet

    torch.manual_seed(cfg.run.seed)
    vocab_size, n_attr, t_max, p, s = 12, 5, 5, 12, 3
    model = GroundingNet(vocab_size, n_attr, image_size=p, embed_dim=6, hidden=4, widths=(4, 8), attr_hidden=8).double()
    grid = GridSpec.from_image(p, s)
    gen = torch.Generator().manual_seed(cfg.run.seed)
    boxes = [BoxXYWH(1, 2, 5, 6), BoxXYWH(3, 3, 6, 6)]
    cells = [center_cell(b, grid) for b in boxes]
    images = torch.rand(2, 3, p, p, generator=gen, dtype=torch.float64)
    ids = torch.randint(2, vocab_size, (2, t_max), generator=gen)
    ids[0, 3:] = 0
    gt = torch.tensor([b.to_list() for b in boxes], dtype=torch.float64)
    targets = torch.tensor([encode_box(b, grid) for b in boxes], dtype=torch.float64)
    centers = torch.tensor([r * s + c for c, r in cells])
    attr = torch.tensor([[1, 0, 1, 0, 0], [0, 0, 0, 0, 0]], dtype=torch.float64)
    attr_w = torch.linspace(0.3, 1.0, n_attr, dtype=torch.float64)
    weights = cfg.loss_weights

    def objective() -> torch.Tensor:
        out = model(images, ids)
        return model.losses(out, gt, targets, centers, attr, attr_w, weights, cfg.train.eta).total

    report = grad_check(objective, model.param_groups(), eps=args.eps, max_per_tensor=args.max_per_tensor, seed=cfg.run.seed)
    payload = {
        "config_hash": cfg.hash(),
        "max_rel_error": report.max_rel_error,
        "checked": report.checked,
        "per_group": report.per_group,
        "nonfinite": report.nonfinite,
        "tolerance": GRADCHECK_TOL,
    }
    run = make_run_dir("gradcheck", cfg, args.out)
    _write_json(run / "gradcheck.json", payload)
    print(json.dumps(payload))
    if not report.ok or report.max_rel_error >= GRADCHECK_TOL:
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    run = make_run_dir("ablate", cfg, args.out)
    data = pipeline.prepare(cfg)

    def train_and_eval(weights):
        result = pipeline.train(cfg, data, weights)
        return pipeline.evaluate(result.model, data.test, cfg.train.eta).accuracy, result.best_epoch

    rows = ablation_table(train_and_eval, ABLATION_ROWS)
    table = render_ablation(rows)
    (run / "ablation.txt").write_text(table + "\n")
    _write_json(
        run / "ablation.json",
        {
            "config_hash": cfg.hash(),
            "rows": [
                {"line": r.line, "name": r.name, "weights": list(r.weights.as_tuple()), "accuracy": r.accuracy, "best_epoch": r.best_epoch}
                for r in rows
            ],
        },
    )
    print(table)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="refground", description="Single-stage referring-expression grounding.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML config file, or a shipped profile name: desk, paper (default: desk)")
        p.add_argument("--out", help="run directory (default: $%s/<command>-<config hash>)" % RUNS_ENV)
        p.add_argument("--threads", type=int, help="torch threads; forced to 1 in deterministic mode")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic shapes manifest")
    p.add_argument("--seed", type=int, help="shorthand for --run.seed")
    add("train", cmd_train, "train a grounder and write log, checkpoint and metrics")
    p = add("eval", cmd_eval, "IoU accuracy of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p = add("predict", cmd_predict, "ground one expression in one image; prints a JSON line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--expr", required=True)
    p.add_argument("--id", help="record id (default: image file stem)")
    p.add_argument("--gt", help="ground-truth box x,y,w,h in image pixels; adds IoU")
    p.add_argument("--heatmap", help="write the attention heat map PNG here")
    p.add_argument("--topk", type=int, default=0, help="report the top-k attribute words")
    p = add("bench", cmd_bench, "per-referent latency of single-stage inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("-n", type=int, default=100)
    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient check on a micro model")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--max-per-tensor", type=int, default=None)
    add("ablate", cmd_ablate, "train the four loss configurations and print the table")
    p = add("import-refcoco", cmd_import, "validate and normalize a JSON-lines annotation file")
    p.add_argument("--input", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("a command is required (see --help)")
        overrides = _split_overrides(extra)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        if args.config and not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        cfg = load(args.config, overrides)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        pipeline.configure_threads(cfg, args.threads)
        return args.func(args, cfg)
    except (ConfigError, ManifestError, SceneGenerationError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
