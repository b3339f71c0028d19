"""Contrastive training loop with best-validation checkpointing."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ExperimentConfig
from .data import ImageCache, PairSample
from .errors import TrainingError
from .model import SiameseNetwork

log = logging.getLogger(__name__)


def contrastive_loss(d, y, margin: float = 2.0):
    """0.5 * [(1 - y) d^2 + y max(0, m - d)^2], elementwise.

    Accepts python floats or tensors. y = 0 marks a same-class pair.
    """
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    if isinstance(d, torch.Tensor) or isinstance(y, torch.Tensor):
        d = torch.as_tensor(d)
        y = torch.as_tensor(y, dtype=d.dtype)
        if not torch.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        hinge = torch.clamp(margin - d, min=0.0)
        return 0.5 * ((1 - y) * d ** 2 + y * hinge ** 2)
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y}")
    hinge = max(0.0, margin - d)
    return 0.5 * ((1 - y) * d * d + y * hinge * hinge)


def contrastive_loss_grad(d: float, y: int, margin: float = 2.0) -> float:
    """Analytic dL/dd (one-sided at the hinge d = m)."""
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y}")
    return (1 - y) * d - y * max(0.0, margin - d)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 means no epoch ran

    def to_dict(self) -> dict:
        return {"train_loss": self.train_loss, "val_loss": self.val_loss,
                "val_accuracy": self.val_accuracy, "best_epoch": self.best_epoch}


def pair_tensors(pairs: Sequence[PairSample], cache: ImageCache) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    a = torch.from_numpy(np.stack([cache(p.anchor) for p in pairs]))
    b = torch.from_numpy(np.stack([cache(p.partner) for p in pairs]))
    y = torch.tensor([p.label for p in pairs], dtype=torch.float32)
    return a, b, y


def _batch_loss(model: SiameseNetwork, a, b, y, config: ExperimentConfig) -> tuple[torch.Tensor, torch.Tensor]:
    e_a, e_b = model.embed_pair(a, b)
    dist = model.distance(e_a, e_b)
    if config.loss_on == "output":
        d = torch.sigmoid(model.head_logit(dist))
        loss = contrastive_loss(d, y, config.margin).mean()
    else:
        # tower learns on the raw distance; the head is fitted on the detached
        # distance so d stays meaningful for decisions and explanations
        d = torch.sigmoid(model.head_logit(dist.detach()))
        loss = (contrastive_loss(dist, y, config.margin).mean()
                + contrastive_loss(d, y, config.margin).mean())
    return loss, d


@torch.no_grad()
def predict_pairs(model: SiameseNetwork, pairs: Sequence[PairSample], cache: ImageCache,
                  batch_size: int = 64) -> np.ndarray:
    """Model output d for every pair, in order."""
    model.eval()
    out = []
    for start in range(0, len(pairs), batch_size):
        a, b, _ = pair_tensors(pairs[start:start + batch_size], cache)
        out.append(model(a, b).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


@torch.no_grad()
def evaluate_loss(model: SiameseNetwork, pairs: Sequence[PairSample], cache: ImageCache,
                  config: ExperimentConfig) -> tuple[float, float]:
    """(mean loss, accuracy at config.threshold) in inference mode."""
    model.eval()
    total, correct = 0.0, 0
    for start in range(0, len(pairs), config.batch_size):
        a, b, y = pair_tensors(pairs[start:start + config.batch_size], cache)
        loss, d = _batch_loss(model, a, b, y, config)
        total += loss.item() * len(y)
        correct += int(((d < config.threshold).float() == (1 - y)).sum())
    return total / len(pairs), correct / len(pairs)


def train(model: SiameseNetwork, train_pairs: Sequence[PairSample], val_pairs: Sequence[PairSample],
          config: ExperimentConfig, cache: ImageCache | None = None,
          log_path: str | Path | None = None) -> tuple[SiameseNetwork, TrainHistory]:
    """Adam on the mean contrastive loss; returns the best-val_loss parameters.

    Batches are drawn from a numpy generator seeded with ``config.seed``, so
    two calls with the same model init, pairs and config are identical. With
    no validation pairs the training loss selects the checkpoint.
    """
    if not train_pairs:
        raise TrainingError("no training pairs")
    cache = cache or ImageCache(config.image_size)
    if config.freeze_backbone:
        for p in model.tower.backbone.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best_state, best_loss = copy.deepcopy(model.state_dict()), float("inf")
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            order = rng.permutation(len(train_pairs))
            running, seen = 0.0, 0
            for batch_no, start in enumerate(range(0, len(order), config.batch_size), start=1):
                batch = [train_pairs[i] for i in order[start:start + config.batch_size]]
                if not batch:
                    continue
                a, b, y = pair_tensors(batch, cache)
                loss, _ = _batch_loss(model, a, b, y, config)
                if not torch.isfinite(loss):
                    raise TrainingError(f"divergence at epoch {epoch}, batch {batch_no}", code="divergence")
                optimizer.zero_grad()
                loss.backward()
                if config.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
                optimizer.step()
                running += loss.item() * len(batch)
                seen += len(batch)
            train_loss = running / seen
            if val_pairs:
                val_loss, val_acc = evaluate_loss(model, val_pairs, cache, config)
            else:
                val_loss, val_acc = evaluate_loss(model, train_pairs, cache, config)
            history.train_loss.append(train_loss)
            history.val_loss.append(val_loss)
            history.val_accuracy.append(val_acc)
            if val_loss < best_loss:
                best_loss, history.best_epoch = val_loss, epoch
                best_state = copy.deepcopy(model.state_dict())
            record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                      "val_accuracy": val_acc}
            log.info("epoch %d train_loss %.5f val_loss %.5f val_acc %.3f",
                     epoch, train_loss, val_loss, val_acc)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    return model, history


def fit(config: ExperimentConfig, data_root: str | Path, out_dir: str | Path) -> tuple[SiameseNetwork, TrainHistory]:
    """Index, split, pair, train and save into ``out_dir``.

    Writes ``split.tsv``, ``pairs_{train,val,test}.jsonl``, ``train_log.jsonl``,
    ``history.json``, ``config.yaml`` and ``model.pt``.
    """
    from .config import save_config
    from .data import index_dataset, pairs_by_split, stratified_split, write_pair_manifest, write_split_manifest
    from .model import build_model, save_model

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = stratified_split(index_dataset(data_root).records, config.train_fraction,
                               config.val_fraction_of_train, config.seed)
    write_split_manifest(records, out_dir / "split.tsv")
    pairs = pairs_by_split(records, config.seed)
    for split, split_pairs in pairs.items():
        write_pair_manifest(split_pairs, out_dir / f"pairs_{split}.jsonl")
    save_config(config, out_dir / "config.yaml")
    model = build_model(config, seed=config.seed)
    model, history = train(model, pairs["train"], pairs["val"], config,
                           log_path=out_dir / "train_log.jsonl")
    (out_dir / "history.json").write_text(json.dumps(history.to_dict(), indent=2) + "\n")
    save_model(model, out_dir / "model.pt")
    return model, history
