"""Contrastive fine-tuning loop.

Every training frame is its own class; its positive is the half-scale,
independently flipped view of the same crop.
"""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from hdrvqa.contrastive.losses import ntxent_loss, paired_view_labels
from hdrvqa.contrastive.models import ContrastiveModel, save_checkpoint
from hdrvqa.contrastive.schedule import config_lr_at
from hdrvqa.contrastive.views import build_views
from hdrvqa.errors import ConfigError, TrainingDiverged

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 768
    crop_size: int = 256
    patch_size: int | None = 64
    epochs: int = 25
    base_lr: float = 0.1
    warmup_epochs: int = 2
    tau: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    flip_prob: float = 0.5
    half_scale_prob: float = 1.0
    seed: int = 0
    batch_grouping: str = "random"  # or "source": keep every version of a source in one batch
    workers: int = 0
    checkpoint_every_epoch: bool = True

    def __post_init__(self):
        for name in ("batch_size", "crop_size", "base_lr", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_grouping not in ("random", "source"):
            raise ConfigError(f"batch_grouping must be 'random' or 'source', got {self.batch_grouping!r}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be non-negative")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be below epochs ({self.epochs})")
        if self.patch_size is not None:
            if self.crop_size % self.patch_size or (self.crop_size // 2) % self.patch_size:
                raise ConfigError(
                    f"patch_size {self.patch_size} must tile both the {self.crop_size} crop "
                    f"and its {self.crop_size // 2} half-scale view")

    def patches_per_view(self) -> tuple[int, int]:
        """Patch counts for the native and half-scale views."""
        if self.patch_size is None:
            return 1, 1
        return (self.crop_size // self.patch_size) ** 2, (self.crop_size // 2 // self.patch_size) ** 2


def _to_tensor(views: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(views)).permute(0, 3, 1, 2).contiguous()


def _project(model: ContrastiveModel, views: list[np.ndarray], patch_size: int | None) -> torch.Tensor:
    """Projector outputs in input order; views of different sizes are encoded in separate passes."""
    shapes = sorted({v.shape for v in views})
    if len(shapes) == 1:
        return model(_to_tensor(views), patch_size)[1]
    out = [None] * len(views)
    for shape in shapes:
        idx = [i for i, v in enumerate(views) if v.shape == shape]
        z = model(_to_tensor([views[i] for i in idx]), patch_size)[1]
        for row, i in enumerate(idx):
            out[i] = z[row]
    return torch.stack(out)


def epoch_order(n: int, rng: np.random.Generator, groups: Sequence | None = None) -> np.ndarray:
    """Frame visiting order; with ``groups``, members of a group are kept adjacent."""
    if groups is None:
        return rng.permutation(n)
    groups = np.asarray(groups)
    keys = np.unique(groups)
    order = [rng.permutation(np.flatnonzero(groups == k)) for k in rng.permutation(keys)]
    return np.concatenate(order)


def finetune(frames: Sequence, model: ContrastiveModel, config: TrainConfig,
             out_dir: str | Path | None = None, manifest_hash: str | None = None,
             groups: Sequence | None = None,
             on_epoch: Callable[[dict], None] | None = None) -> tuple[ContrastiveModel, list[dict]]:
    """Fine-tune ``model`` in place on ``frames`` (each an (H, W, 3) array in [0, 1]).

    ``groups`` gives each frame's source id and is used when
    ``config.batch_grouping == "source"``. Returns the model and one log
    record per epoch. With ``out_dir`` set, a JSON-lines log plus per-epoch
    and final checkpoints are written there.
    """
    n = len(frames)
    if n == 0:
        raise ValueError("no training frames")
    if config.batch_grouping == "source" and (groups is None or len(groups) != n):
        raise ConfigError("source-grouped batching needs one group id per frame")
    steps_per_epoch = math.ceil(n / config.batch_size)
    torch.manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=0.0, momentum=config.momentum,
                                weight_decay=config.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")

    pool = ThreadPoolExecutor(config.workers) if config.workers > 0 else None

    def make_pair(epoch: int, idx: int):
        rng = np.random.default_rng([config.seed, epoch, int(idx)])
        return build_views(frames[int(idx)], config.crop_size, rng, config.flip_prob, config.half_scale_prob)

    history = []
    step = 0
    try:
        for epoch in range(config.epochs):
            model.train()
            start = time.perf_counter()
            perm = epoch_order(n, order_rng, groups if config.batch_grouping == "source" else None)
            losses = []
            for b in range(steps_per_epoch):
                idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
                jobs = [(epoch, i) for i in idx]
                pairs = list(pool.map(lambda a: make_pair(*a), jobs)) if pool else [make_pair(*a) for a in jobs]

                lr = config_lr_at(step, config, steps_per_epoch)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                z_a = _project(model, [p[0] for p in pairs], config.patch_size)
                z_p = _project(model, [p[1] for p in pairs], config.patch_size)
                z = torch.cat([z_a, z_p])
                loss = ntxent_loss(z, paired_view_labels(len(idx)), config.tau)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step} (lr={lr:.3g}); "
                        f"|z| max={z.detach().abs().max().item():.3g}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
                step += 1

            record = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "lr": lr,
                      "wall_time": round(time.perf_counter() - start, 3)}
            history.append(record)
            log.info("epoch %d loss %.4f lr %.4g", record["epoch"], record["loss"], lr)
            if on_epoch is not None:
                on_epoch(record)
            if out is not None:
                with open(out / "train_log.jsonl", "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
                if config.checkpoint_every_epoch:
                    save_checkpoint(out / f"epoch_{epoch + 1:03d}.pt", model, config, manifest_hash, epoch + 1)
    finally:
        if pool is not None:
            pool.shutdown()

    if out is not None:
        save_checkpoint(out / "final.pt", model, config, manifest_hash, config.epochs)
    return model, history
