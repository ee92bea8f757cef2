"""Supervised training loop and single-model inference.

Adam with a per-step linear learning-rate decay, per-case counter-based
augmentation streams, and an optional deep-supervision composite loss. Given
a seed (and a fixed thread count) a run is fully reproducible: batch order,
augmentation, and dropout all derive from named substreams of the seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationSpec, augment_arrays
from .losses import LossConfig, ds_composite, loss_fn
from .network import NetworkConfig, UNet3D, build_network
from .volume import BinaryMask, CaseRecord, ProbabilityMap, case_channels

# named substreams of the run seed
_STREAM_ORDER = 11
_STREAM_AUGMENT = 12
_STREAM_DROPOUT = 13


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr_start: float = 5e-4
    lr_end: float = 5e-6
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not (self.lr_start >= self.lr_end > 0):
            raise TrainingError("need lr_start >= lr_end > 0")


@dataclass
class TrainingLog:
    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)

    def append(self, **kwargs):
        self.rows.append(kwargs)

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row.get(k, "") for k in self.columns})


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear decay from lr_start (step 0) to lr_end (step == total_steps)."""
    if not (0 <= step <= total_steps):
        raise TrainingError(f"step {step} outside [0, {total_steps}]")
    frac = step / total_steps if total_steps else 1.0
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac


def substream(*parts: int) -> np.random.Generator:
    return np.random.default_rng(list(parts))


def torch_generator(*parts: int) -> torch.Generator:
    seed = int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0] >> 1)
    return torch.Generator().manual_seed(seed)


def _augmented_batch(
    cases: list[CaseRecord],
    indices,
    spec: AugmentationSpec,
    seed: int,
    epoch: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ys = [], []
    for idx in indices:
        case = cases[int(idx)]
        rng = substream(seed, _STREAM_AUGMENT, epoch, int(idx))
        channels, label, _ = augment_arrays(case_channels(case), case.label.data, spec, rng)
        xs.append(channels)
        ys.append(label)
    x = torch.from_numpy(np.stack(xs))
    y = torch.from_numpy(np.stack(ys)).unsqueeze(1).float()
    return x, y


def supervised_loss(out_list, y: torch.Tensor, loss_cfg: LossConfig, deep_supervision: bool):
    base = loss_fn(loss_cfg)
    if deep_supervision:
        return ds_composite([base(o, y) for o in out_list], loss_cfg.ds_weights)
    return base(out_list[-1], y)


def train(
    cases: list[CaseRecord],
    net_cfg: NetworkConfig,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[UNet3D, TrainingLog]:
    """Train a network on labeled cases; returns the model and the epoch log.

    The logged lr is the schedule value at the first step of each epoch.
    With checkpoint_dir set, the weights are archived after every epoch
    (epoch_0000.npz, ...); the returned model always equals the final epoch
    (no early stopping or model selection).
    """
    if not cases:
        raise TrainingError("empty training dataset")
    for case in cases:
        if case.label is None:
            raise TrainingError(f"case {case.id} has no label")
        if not case.grid.same_as(cases[0].grid):
            raise TrainingError("all training cases must share one grid")

    model = build_network(net_cfg, seed=cfg.seed)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_start)
    steps_per_epoch = math.ceil(len(cases) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    log = TrainingLog(("epoch", "mean_loss", "lr"))
    step = 0
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, _STREAM_ORDER, epoch).permutation(len(cases))
        epoch_losses = []
        epoch_lr = lr_at(step, total_steps, cfg)
        for b in range(steps_per_epoch):
            indices = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x, y = _augmented_batch(cases, indices, cfg.augmentation, cfg.seed, epoch)
            lr = lr_at(step, total_steps, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            drop_rng = torch_generator(cfg.seed, _STREAM_DROPOUT, epoch, b)
            out = model(x, train=True, rng=drop_rng)
            loss = supervised_loss(out.outputs, y, cfg.loss, net_cfg.deep_supervision)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
            step += 1
        log.append(epoch=epoch, mean_loss=float(np.mean(epoch_losses)), lr=epoch_lr)
        if checkpoint_dir is not None:
            from .network import save_checkpoint

            save_checkpoint(model, Path(checkpoint_dir) / f"epoch_{epoch:04d}.npz")
    model.eval()
    if log_path is not None:
        log.write_csv(log_path)
    return model, log


def infer(model: UNet3D, case: CaseRecord) -> tuple[ProbabilityMap, BinaryMask]:
    """Deterministic eval-mode inference; voxels at probability >= 0.5 are lesion."""
    x = torch.from_numpy(case_channels(case))
    with torch.no_grad():
        out = model(x, train=False)
    prob = out.final.squeeze(0).numpy().astype(np.float32)
    mask = (prob >= 0.5).astype(np.uint8)
    return ProbabilityMap(case.grid, prob), BinaryMask(case.grid, mask)
