"""Seeded training loop, checkpoints and batched inference."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .boxes import DetectionSet
from .detection import LossWeights, compute_losses
from .model import FramePrep, ModelConfig, UniBEVFusion, collate
from .synth import Frame

__all__ = ["TrainConfig", "Trainer", "CheckpointMismatch", "config_hash", "predict",
           "set_deterministic", "load_checkpoint"]

log = logging.getLogger(__name__)


class CheckpointMismatch(RuntimeError):
    """A checkpoint was produced under a different configuration."""


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def set_deterministic(enabled: bool = True):
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 2
    lr: float = 1e-3
    seed: int = 0
    deterministic: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    grad_clip: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = LossWeights(**d.pop("weights", {}))
        return cls(weights=w, **d)


def _pillar_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 7]).generate_state(1)[0])


class Trainer:
    """Adam at a fixed learning rate over a fixed list of frames.

    The batch order at step ``s`` depends only on ``(seed, s)``, so a resumed
    run replays exactly the batches an uninterrupted run would have seen.
    """

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, frames: Sequence[Frame]):
        if not frames:
            raise ValueError("training needs at least one frame")
        if train_cfg.deterministic:
            set_deterministic(True)
            model_cfg.splat_mode = "sorted"
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.frames = list(frames)
        torch.manual_seed(train_cfg.seed)
        self.model = UniBEVFusion(model_cfg)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=train_cfg.lr)
        self.step = 0
        self.preps: list[FramePrep] = [self.model.prepare(f, _pillar_seed(train_cfg.seed, i))
                                       for i, f in enumerate(self.frames)]
        self.history: list[dict] = []

    @property
    def hash(self) -> str:
        # the step budget is left out so a run can be resumed with a longer schedule
        train = {k: v for k, v in self.cfg.to_dict().items() if k != "steps"}
        return config_hash({"model": self.model_cfg.to_dict(), "train": train})

    def batch_indices(self, step: int) -> list[int]:
        n, bs = len(self.frames), min(self.cfg.batch_size, len(self.frames))
        out = []
        for k in range(step * bs, step * bs + bs):
            epoch, pos = divmod(k, n)
            perm = np.random.default_rng([self.cfg.seed, epoch]).permutation(n)
            out.append(int(perm[pos]))
        return out

    def train_step(self) -> dict:
        self.model.train()
        idx = self.batch_indices(self.step)
        batch = collate([self.frames[i] for i in idx], [self.preps[i] for i in idx])
        out = self.model(batch)
        losses = compute_losses(out, batch.targets, self.cfg.weights, out["depth_logits"],
                                batch.depth_targets)
        self.optimizer.zero_grad()
        losses["total"].backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        row = {"step": self.step, **{k: float(v.detach()) for k, v in losses.items()}}
        self.history.append(row)
        return row

    def run(self, steps: int | None = None, loss_csv=None, log_every: int = 100,
            extra_columns: dict | None = None) -> list[dict]:
        target = self.cfg.steps if steps is None else steps
        rows = []
        while self.step < target:
            row = self.train_step()
            rows.append(row)
            if log_every and row["step"] % log_every == 0:
                log.info("step %d total %.4f", row["step"], row["total"])
        if loss_csv is not None:
            _append_loss_csv(Path(loss_csv), [{**r, **(extra_columns or {})} for r in rows])
        return rows

    def save(self, path) -> None:
        torch.save({"model": self.model.state_dict(), "optimizer": self.optimizer.state_dict(),
                    "step": self.step, "config_hash": self.hash,
                    "model_config": self.model_cfg.to_dict(), "train_config": self.cfg.to_dict()},
                   path)

    def resume(self, path) -> None:
        ckpt = torch.load(path, weights_only=False)
        if ckpt["config_hash"] != self.hash:
            raise CheckpointMismatch(
                f"checkpoint {path} was trained with config {ckpt['config_hash']}, current config "
                f"is {self.hash}; refusing to resume")
        self.model.load_state_dict(ckpt["model"])
        self.optimizer.load_state_dict(ckpt["optimizer"])
        self.step = ckpt["step"]


def _append_loss_csv(path: Path, rows: list[dict]):
    if not rows:
        return
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        if new:
            w.writeheader()
        w.writerows(rows)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, checkpoint dict)."""
    ckpt = torch.load(path, weights_only=False)
    cfg = ModelConfig.from_dict(ckpt["model_config"])
    model = UniBEVFusion(cfg)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, ckpt


def predict(model: UniBEVFusion, frames: Sequence[Frame], images: Sequence[np.ndarray] | None = None,
            batch_size: int = 4, score_thr: float = 0.1, nms_iou: float = 0.1,
            max_dets: int = 50, preps: Sequence[FramePrep] | None = None) -> list[DetectionSet]:
    """Detections per frame. ``images`` replaces the frames' pixels, e.g. with noisy copies."""
    if preps is None:
        preps = [model.prepare(f, _pillar_seed(0, i), with_targets=False) for i, f in enumerate(frames)]
    out = []
    for s in range(0, len(frames), batch_size):
        fr = frames[s:s + batch_size]
        im = images[s:s + batch_size] if images is not None else None
        batch = collate(fr, preps[s:s + batch_size], im)
        out += model.detect(batch, score_thr, nms_iou, max_dets)
    return out
