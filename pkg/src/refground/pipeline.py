"""Glue between a run configuration, the data, the network and its checkpoints."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch

from .config import ConfigError, RunConfig, from_dict
from .data import DatasetManifest, generate_dataset, extract_attribute_vocab, import_refcoco_style
from .evaluation import EvalReport, accuracy_at_iou
from .grounder import AttributeVocab, GroundingNet, LossWeights
from .text import Vocabulary
from .training import EncodedSet, FitResult, encode_samples, fit, predict_set

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class Prepared:
    manifest: DatasetManifest
    vocab: Vocabulary
    attr_vocab: AttributeVocab
    train: EncodedSet
    val: EncodedSet
    test: EncodedSet


def configure_threads(cfg: RunConfig, threads: int | None = None) -> int:
    """Apply the thread count; deterministic mode always runs on one thread."""
    n = threads if threads is not None else cfg.run.threads
    if cfg.run.deterministic:
        if n != 1:
            log.warning("deterministic mode: forcing 1 thread (requested %d)", n)
        n = 1
        torch.use_deterministic_algorithms(True)
    torch.set_num_threads(n)
    return n


def load_manifest(cfg: RunConfig) -> DatasetManifest:
    """The configured manifest file, or a freshly generated synthetic one."""
    if cfg.data.manifest:
        return import_refcoco_style(cfg.data.manifest)
    counts = {"train": cfg.data.n_train, "val": cfg.data.n_val, "test": cfg.data.n_test}
    return generate_dataset(cfg.run.seed, cfg.scene_config(), counts)


def prepare(cfg: RunConfig, manifest: DatasetManifest | None = None) -> Prepared:
    """Build vocabularies from the train split and encode every split."""
    manifest = manifest if manifest is not None else load_manifest(cfg)
    train = manifest.split("train")
    if not train:
        raise ConfigError("manifest has no train samples")
    vocab = Vocabulary.build(s.expression for s in train)
    attr_vocab = extract_attribute_vocab(train, cfg.model.n_attr)
    grid = build_model(cfg, len(vocab), len(attr_vocab)).grid
    root = cfg.data.image_root or None
    sets = [
        encode_samples(manifest.split(name), vocab, attr_vocab, grid, cfg.model.t_max, root)
        for name in ("train", "val", "test")
    ]
    return Prepared(manifest, vocab, attr_vocab, *sets)


def build_model(cfg: RunConfig, vocab_size: int, n_attr: int) -> GroundingNet:
    torch.manual_seed(cfg.run.seed)
    model = GroundingNet(vocab_size, n_attr, **cfg.model_kwargs())
    if model.S != cfg.model.grid_size:
        raise ConfigError(f"backbone gives grid {model.S}, config says {cfg.model.grid_size}")
    return model


def train(
    cfg: RunConfig,
    data: Prepared,
    weights: LossWeights | None = None,
    on_epoch: Callable[[dict[str, float]], None] | None = None,
) -> FitResult:
    model = build_model(cfg, len(data.vocab), len(data.attr_vocab))
    return fit(model, data.train, data.val, data.attr_vocab, cfg.train_config(weights), on_epoch)


def evaluate(model: GroundingNet, data: EncodedSet, eta: float = 0.5, split: str = "test") -> EvalReport:
    return accuracy_at_iou(predict_set(model, data), data.boxes.double().numpy(), eta, split)


def save_checkpoint(
    path: str | Path, model: GroundingNet, cfg: RunConfig, vocab: Vocabulary, attr_vocab: AttributeVocab
) -> None:
    state = model.state_dict()
    names = {id(p): n for n, p in model.named_parameters()}
    groups = {g: {names[id(p)]: state[names[id(p)]] for p in ps} for g, ps in model.param_groups().items()}
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": cfg.to_dict(),
            "config_hash": cfg.hash(),
            "vocab": vocab.tokens,
            "attr_vocab": attr_vocab.to_dict(),
            "groups": groups,
            "buffers": {n: b for n, b in model.named_buffers()},
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[GroundingNet, RunConfig, Vocabulary, AttributeVocab]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {blob.get('format')!r}")
    cfg = from_dict(blob["config"]).validate()
    if cfg.hash() != blob["config_hash"]:
        raise ConfigError(f"{path}: config hash mismatch")
    vocab = Vocabulary(blob["vocab"])
    attr_vocab = AttributeVocab.from_dict(blob["attr_vocab"])
    model = build_model(cfg, len(vocab), len(attr_vocab))
    missing = set(model.GROUPS) - set(blob["groups"])
    if missing:
        raise ConfigError(f"{path}: checkpoint lacks parameter groups {sorted(missing)}")
    state = {n: t for g in blob["groups"].values() for n, t in g.items()}
    state.update(blob["buffers"])
    model.load_state_dict(state)
    model.eval()
    return model, cfg, vocab, attr_vocab
