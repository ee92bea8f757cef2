"""Class-imbalance segmentation losses and the deep-supervision composite.

Two training losses are provided: the sum of generalized Dice loss and
binary cross-entropy, and the asymmetric unified focal loss (a convex
combination of a focal cross-entropy term, with background-only focal
damping, and a focal Tversky term enhanced on the foreground only).

All losses accept probability tensors shaped (X,Y,Z) or with leading batch
dimensions; generalized Dice class weights are computed per batch item and
averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

GDL_EPSILON = 1e-5
PROB_CLAMP = 1e-7
TVERSKY_EPSILON = 1e-7

DEFAULT_DS_WEIGHTS = (0.03, 0.045, 0.05, 0.125, 0.25, 0.5)


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    kind: str = "ufl"                     # "gdl_bce" or "ufl"
    ufl_lambda: float = 0.5
    ufl_delta: float = 0.6
    ufl_gamma: float = 0.5
    ds_weights: tuple[float, ...] = DEFAULT_DS_WEIGHTS
    gdl_epsilon: float = GDL_EPSILON

    def __post_init__(self):
        if self.kind not in ("gdl_bce", "ufl"):
            raise LossError(f"unknown loss kind {self.kind!r}")
        if not (0.0 <= self.ufl_lambda <= 1.0):
            raise LossError("ufl_lambda must be in [0,1]")
        if not (0.0 <= self.ufl_delta <= 1.0):
            raise LossError("ufl_delta must be in [0,1]")
        if not (0.0 <= self.ufl_gamma < 1.0):
            raise LossError("ufl_gamma must be in [0,1)")
        if len(self.ds_weights) != 6:
            raise LossError("ds_weights must have six entries")
        if abs(sum(self.ds_weights) - 1.0) > 1e-9:
            raise LossError(f"ds_weights must sum to 1, got {sum(self.ds_weights)}")
        if self.gdl_epsilon <= 0:
            raise LossError("gdl_epsilon must be positive")


def _check_shapes(p: torch.Tensor, y: torch.Tensor) -> None:
    if p.shape != y.shape:
        raise LossError(f"shape mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")


def _as_batch(t: torch.Tensor) -> torch.Tensor:
    """(B, V) view: trailing three dims are voxels, everything else is batch."""
    if t.dim() < 3:
        raise LossError(f"expected at least a 3D tensor, got {t.dim()}D")
    if t.dim() == 3:
        return t.reshape(1, -1)
    return t.reshape(-1, t.shape[-3] * t.shape[-2] * t.shape[-1])


def gdl(p: torch.Tensor, y: torch.Tensor, eps: float = GDL_EPSILON) -> torch.Tensor:
    """Generalized Dice loss over {lesion, background} with 1/volume^2 weights."""
    _check_shapes(p, y)
    pb, yb = _as_batch(p), _as_batch(y.to(p.dtype))
    w_fg = 1.0 / (yb.sum(dim=1) ** 2 + eps)
    w_bg = 1.0 / ((1.0 - yb).sum(dim=1) ** 2 + eps)
    inter = w_fg * (pb * yb).sum(dim=1) + w_bg * ((1.0 - pb) * (1.0 - yb)).sum(dim=1)
    total = w_fg * (pb + yb).sum(dim=1) + w_bg * ((1.0 - pb) + (1.0 - yb)).sum(dim=1)
    per_item = 1.0 - (2.0 * inter + eps) / (total + eps)
    return per_item.mean()


def bce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped away from {0,1}."""
    _check_shapes(p, y)
    pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    yf = y.to(p.dtype)
    return -(yf * pc.log() + (1.0 - yf) * (1.0 - pc).log()).mean()


def gdl_bce(p: torch.Tensor, y: torch.Tensor, eps: float = GDL_EPSILON) -> torch.Tensor:
    return gdl(p, y, eps) + bce(p, y)


def ufl(
    p: torch.Tensor,
    y: torch.Tensor,
    lam: float = 0.5,
    delta: float = 0.6,
    gamma: float = 0.5,
) -> torch.Tensor:
    """Asymmetric unified focal loss: lam * focal CE + (1-lam) * focal Tversky.

    The cross-entropy term applies focal damping p^gamma to background voxels
    only; the Tversky term (delta weighting false negatives) is enhanced on
    the foreground with exponent (1-gamma).
    """
    if not (0.0 <= lam <= 1.0 and 0.0 <= delta <= 1.0 and 0.0 <= gamma < 1.0):
        raise LossError(f"invalid UFL parameters lam={lam}, delta={delta}, gamma={gamma}")
    _check_shapes(p, y)
    yf = y.to(p.dtype)
    pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)

    fore_ce = -delta * yf * pc.log()
    back_ce = -(1.0 - delta) * (1.0 - yf) * pc.pow(gamma) * (1.0 - pc).log()
    focal_ce = (fore_ce + back_ce).mean()

    pb, yb = _as_batch(p), _as_batch(yf)
    tp = (pb * yb).sum(dim=1)
    fn = ((1.0 - pb) * yb).sum(dim=1)
    fp = (pb * (1.0 - yb)).sum(dim=1)
    mti = (tp + TVERSKY_EPSILON) / (tp + delta * fn + (1.0 - delta) * fp + TVERSKY_EPSILON)
    focal_tversky = (1.0 - mti).clamp_min(0.0).pow(1.0 - gamma).mean()

    return lam * focal_ce + (1.0 - lam) * focal_tversky


def ds_composite(losses: list[torch.Tensor] | tuple, weights=DEFAULT_DS_WEIGHTS) -> torch.Tensor:
    """Weighted sum of the six deep-supervision head losses (head order preserved)."""
    if len(losses) != len(weights):
        raise LossError(f"expected {len(weights)} losses, got {len(losses)}")
    total = None
    for w, item in zip(weights, losses):
        term = w * item
        total = term if total is None else total + term
    return total


def loss_fn(cfg: LossConfig):
    """Callable (p, y) -> scalar for the configured loss kind."""
    if cfg.kind == "gdl_bce":
        return lambda p, y: gdl_bce(p, y, cfg.gdl_epsilon)
    return lambda p, y: ufl(p, y, cfg.ufl_lambda, cfg.ufl_delta, cfg.ufl_gamma)
