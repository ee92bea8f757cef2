"""Mean-teacher unsupervised domain adaptation.

A student network is trained on labeled source cases while a teacher -- the
exponential moving average of the student -- supervises it on unlabeled
target cases through a mean-squared consistency loss. Target-batch spatial
augmentation is shared between the student and teacher views; intensity
augmentation is drawn independently. The teacher never receives gradients,
runs without dropout, and is the network returned for inference.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .augment import apply_intensity, apply_spatial, draw_intensity, draw_spatial
from .network import NetworkConfig, UNet3D, build_network
from .training import (
    TrainConfig,
    TrainingError,
    TrainingLog,
    _STREAM_DROPOUT,
    _STREAM_ORDER,
    _augmented_batch,
    lr_at,
    substream,
    supervised_loss,
    torch_generator,
)
from .volume import CaseRecord, case_channels

_STREAM_TARGET_ORDER = 21
_STREAM_TARGET_SPATIAL = 22
_STREAM_TARGET_INT_STUDENT = 23
_STREAM_TARGET_INT_TEACHER = 24
_STREAM_DROPOUT_CONS = 25


@dataclass(frozen=True)
class MTConfig:
    consistency_weight: float = 5.0
    rampup_epochs: int = 60
    ema_decay_rampup: float = 0.99
    ema_decay_final: float = 0.999
    base: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        for a in (self.ema_decay_rampup, self.ema_decay_final):
            if not (0.0 <= a < 1.0):
                raise TrainingError("EMA decays must be in [0,1)")
        if self.rampup_epochs > self.base.epochs:
            raise TrainingError("rampup_epochs cannot exceed base.epochs")
        if self.consistency_weight < 0:
            raise TrainingError("consistency_weight must be >= 0")


def ema_update(teacher: UNet3D, student: UNet3D, alpha: float) -> UNet3D:
    """teacher <- alpha * teacher + (1 - alpha) * student, per parameter."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise TrainingError("teacher and student parameter key sets differ")
    with torch.no_grad():
        for name, tp in t_params.items():
            tp.mul_(alpha).add_(s_params[name], alpha=1.0 - alpha)
    return teacher


def consistency_loss(p_student: torch.Tensor, p_teacher: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between probability maps."""
    if p_student.shape != p_teacher.shape:
        raise TrainingError(
            f"shape mismatch: {tuple(p_student.shape)} vs {tuple(p_teacher.shape)}"
        )
    return ((p_student - p_teacher) ** 2).mean()


def rampup_weight(epoch: int, cfg: MTConfig) -> float:
    """Sigmoid-shaped ramp: w * exp(-5 (1 - min(epoch,R)/R)^2), w for epoch >= R."""
    r = cfg.rampup_epochs
    if r <= 0 or epoch >= r:
        return cfg.consistency_weight
    frac = min(epoch, r) / r
    return cfg.consistency_weight * float(np.exp(-5.0 * (1.0 - frac) ** 2))


def ema_decay_at(epoch: int, cfg: MTConfig) -> float:
    """Step schedule: the ramp-up decay below rampup_epochs, then the final decay."""
    return cfg.ema_decay_rampup if epoch < cfg.rampup_epochs else cfg.ema_decay_final


def _target_batch(
    cases: list[CaseRecord],
    indices,
    cfg: TrainConfig,
    epoch: int,
) -> tuple[torch.Tensor, torch.Tensor, list]:
    """Two views of a target batch: shared spatial draw, independent intensities."""
    student_view, teacher_view, draws = [], [], []
    for idx in indices:
        case = cases[int(idx)]
        spatial = draw_spatial(substream(cfg.seed, _STREAM_TARGET_SPATIAL, epoch, int(idx)), cfg.augmentation)
        warped = np.stack([apply_spatial(ch, spatial, order=1) for ch in case_channels(case)])
        s_rng = substream(cfg.seed, _STREAM_TARGET_INT_STUDENT, epoch, int(idx))
        t_rng = substream(cfg.seed, _STREAM_TARGET_INT_TEACHER, epoch, int(idx))
        s_draws = [draw_intensity(s_rng, cfg.augmentation) for _ in warped]
        t_draws = [draw_intensity(t_rng, cfg.augmentation) for _ in warped]
        student_view.append(np.stack([apply_intensity(ch, d) for ch, d in zip(warped, s_draws)]))
        teacher_view.append(np.stack([apply_intensity(ch, d) for ch, d in zip(warped, t_draws)]))
        draws.append({"spatial": spatial, "student_intensity": s_draws, "teacher_intensity": t_draws})
    return (
        torch.from_numpy(np.stack(student_view)),
        torch.from_numpy(np.stack(teacher_view)),
        draws,
    )


def _target_indices(n_target: int, needed: int, seed: int, epoch: int) -> np.ndarray:
    rng = substream(seed, _STREAM_TARGET_ORDER, epoch)
    chunks = []
    while sum(len(c) for c in chunks) < needed:
        chunks.append(rng.permutation(n_target))
    return np.concatenate(chunks)[:needed]


def train_mt(
    source: list[CaseRecord],
    target: list[CaseRecord],
    net_cfg: NetworkConfig,
    mt_cfg: MTConfig,
    log_path=None,
    record_details: bool = False,
) -> tuple[UNet3D, UNet3D, TrainingLog, list]:
    """Adapt with mean-teacher training; returns (teacher, student, log, step records).

    Per step: one labeled source batch drives the supervised loss on the
    student, one unlabeled target batch drives the consistency loss between
    the student view and the no-dropout teacher view (gradients blocked), the
    student takes an Adam step on sup + w(epoch) * cons, and the teacher is
    EMA-updated.
    """
    cfg = mt_cfg.base
    if not source:
        raise TrainingError("empty source dataset")
    if not target:
        raise TrainingError("empty target dataset")
    for case in source:
        if case.label is None:
            raise TrainingError(f"source case {case.id} has no label")
    for case in target:
        if case.domain != "target":
            raise TrainingError(f"case {case.id} in the target set is tagged {case.domain!r}")

    student = build_network(net_cfg, seed=cfg.seed)
    teacher = copy.deepcopy(student)
    teacher.config = dataclasses.replace(net_cfg, dropout_rate=0.0)  # no teacher dropout
    for p in teacher.parameters():
        p.requires_grad_(False)
    student.train()

    optimizer = torch.optim.Adam(student.parameters(), lr=cfg.lr_start)
    steps_per_epoch = math.ceil(len(source) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    log = TrainingLog(("epoch", "mean_loss", "lr", "consistency_weight_effective", "ema_decay", "sup_loss", "cons_loss"))
    records: list = []
    step = 0
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, _STREAM_ORDER, epoch).permutation(len(source))
        tgt_order = _target_indices(len(target), steps_per_epoch * cfg.batch_size, cfg.seed, epoch)
        w = rampup_weight(epoch, mt_cfg)
        alpha = ema_decay_at(epoch, mt_cfg)
        epoch_lr = lr_at(step, total_steps, cfg)
        losses, sups, conss = [], [], []
        for b in range(steps_per_epoch):
            src_idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            tgt_idx = tgt_order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x_src, y_src = _augmented_batch(source, src_idx, cfg.augmentation, cfg.seed, epoch)
            lr = lr_at(step, total_steps, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr

            out_src = student(x_src, train=True, rng=torch_generator(cfg.seed, _STREAM_DROPOUT, epoch, b))
            sup = supervised_loss(out_src.outputs, y_src, cfg.loss, net_cfg.deep_supervision)

            x_tgt_s, x_tgt_t, draws = _target_batch(target, tgt_idx, cfg, epoch)
            out_tgt_s = student(x_tgt_s, train=True, rng=torch_generator(cfg.seed, _STREAM_DROPOUT_CONS, epoch, b))
            with torch.no_grad():
                out_tgt_t = teacher(x_tgt_t, train=False)
            cons = consistency_loss(out_tgt_s.final, out_tgt_t.final)

            loss = sup + w * cons
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            ema_update(teacher, student, alpha)

            losses.append(float(loss.detach()))
            sups.append(float(sup.detach()))
            conss.append(float(cons.detach()))
            if record_details:
                records.append(
                    {
                        "epoch": epoch,
                        "step": step,
                        "sup_case_ids": [source[int(i)].id for i in src_idx],
                        "sup_domains": [source[int(i)].domain for i in src_idx],
                        "cons_case_ids": [target[int(i)].id for i in tgt_idx],
                        "cons_domains": [target[int(i)].domain for i in tgt_idx],
                        "target_draws": draws,
                    }
                )
            step += 1
        log.append(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            lr=epoch_lr,
            consistency_weight_effective=w,
            ema_decay=alpha,
            sup_loss=float(np.mean(sups)),
            cons_loss=float(np.mean(conss)),
        )
    student.eval()
    teacher.eval()
    if log_path is not None:
        log.write_csv(log_path)
    return teacher, student, log, records
