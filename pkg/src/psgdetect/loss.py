"""Training objective: Huber localization over positive windows plus focal
classification over positive and negative windows.

    total = loc + pos + neg

- loc: mean over positive windows of the summed per-coordinate Huber values
  of (prediction - target); 0 when the segment has no positive windows.
- pos: mean focal term of the assigned-class probability over positives.
- neg: mean focal term of the background probability over negatives, with
  its own normalizer (independent of the positive count).

The focal term is -alpha * (1 - p)^gamma * log(p) with p clamped below at
1e-12; gamma = 0, alpha = 1 reduce it to plain cross-entropy.  All pieces
are built from the autodiff primitives, so ``total`` participates in
backward.  Functions accept float/ndarray inputs where a plain value is
convenient (tables, tests) and Tensors where gradients are needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import MatchResult
from .nncore import ops
from .nncore.tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class LossBreakdown:
    loc: float
    pos: float
    neg: float
    total: float


def huber(u):
    """0.5 u^2 inside |u| < 1, |u| - 0.5 outside; elementwise.

    Tensor input gives a Tensor on the tape; numbers and arrays are computed
    directly.
    """
    if isinstance(u, Tensor):
        inside = (np.abs(u.data) < 1.0).astype(u.data.dtype)
        quad = u * u * 0.5
        lin = ops.abs_(u) - 0.5
        return quad * Tensor(inside) + lin * Tensor(1.0 - inside)
    arr = np.asarray(u, dtype=float)
    out = np.where(np.abs(arr) < 1.0, 0.5 * arr * arr, np.abs(arr) - 0.5)
    return float(out) if np.isscalar(u) or arr.ndim == 0 else out


def localization_loss(y: Tensor, match: MatchResult) -> Tensor:
    """Mean over positive windows of summed per-coordinate Huber values."""
    if match.n_pos == 0:
        return Tensor(np.zeros((), dtype=y.data.dtype))
    pred = y[match.positive_indices]  # (n_pos, 2)
    targets = Tensor(match.targets.astype(y.data.dtype))
    per_window = huber(pred - targets).sum(axis=1)
    return per_window.mean()


def focal_term(p, cfg: LossConfig = LossConfig()):
    """-alpha (1 - p)^gamma log(p), with p clamped below at 1e-12."""
    if isinstance(p, Tensor):
        pc = ops.clip_min(p, PROB_FLOOR)
        modulator = ops.pow_const((-pc) + 1.0, cfg.gamma)
        return ops.neg(modulator * ops.log(pc) * cfg.alpha)
    pc = np.maximum(np.asarray(p, dtype=float), PROB_FLOOR)
    out = -cfg.alpha * (1.0 - pc) ** cfg.gamma * np.log(pc)
    return float(out) if np.isscalar(p) or out.ndim == 0 else out


def classification_losses(p: Tensor, match: MatchResult, cfg: LossConfig):
    """(positive, negative) mean focal losses, each with its own normalizer."""
    dtype = p.data.dtype
    if match.n_pos > 0:
        assigned = p[match.positive_indices, match.labels]
        pos = focal_term(assigned, cfg).mean()
    else:
        pos = Tensor(np.zeros((), dtype=dtype))
    if match.n_neg > 0:
        background = p[match.negative_indices, np.zeros(match.n_neg, dtype=int)]
        neg = focal_term(background, cfg).mean()
    else:
        neg = Tensor(np.zeros((), dtype=dtype))
    return pos, neg


def total_loss(p: Tensor, y: Tensor, match: MatchResult, cfg: LossConfig = LossConfig()):
    """Summed objective for one segment.

    Returns (total, breakdown): ``total`` is a scalar Tensor on the tape;
    the breakdown holds the detached component values.
    """
    loc = localization_loss(y, match)
    pos, neg = classification_losses(p, match, cfg)
    total = loc + pos + neg
    breakdown = LossBreakdown(
        loc=float(loc.data),
        pos=float(pos.data),
        neg=float(neg.data),
        total=float(total.data),
    )
    return total, breakdown
