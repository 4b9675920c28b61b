"""Training objectives: symmetric InfoNCE, Chamfer and MSE embedding losses, stage totals."""

from __future__ import annotations

import warnings
from typing import Mapping, Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError

TAU_INIT = 0.07
TAU_RANGE = (1e-3, 10.0)


def info_nce(za: torch.Tensor, zb: torch.Tensor, tau: torch.Tensor | float,
             reduction: str = "mean") -> torch.Tensor:
    """Symmetric contrastive loss; row ``i`` of ``za`` is the positive of row ``i`` of ``zb``.

    Each pair contributes ``-(log softmax_row + log softmax_col) / 2`` with
    logits ``za @ zb.T / tau``.
    """
    if za.shape != zb.shape or za.ndim != 2 or len(za) < 1:
        raise InvalidArgumentError(f"paired batches must share a shape (n >= 1), got "
                                   f"{tuple(za.shape)} and {tuple(zb.shape)}")
    tau = torch.as_tensor(tau, dtype=za.dtype)
    if not bool(tau > 0):
        raise InvalidArgumentError(f"temperature must be positive, got {float(tau)}")
    logits = za @ zb.T / tau
    diag = torch.arange(len(za))
    row = logits.log_softmax(dim=1)[diag, diag]
    col = logits.log_softmax(dim=0)[diag, diag]
    per_pair = -0.5 * (row + col)
    if reduction == "mean":
        return per_pair.mean()
    if reduction == "sum":
        return per_pair.sum()
    raise InvalidArgumentError(f"unknown reduction {reduction!r}")


def view_alignment_loss(z_p: torch.Tensor, z_i: Optional[torch.Tensor], z_v: Optional[torch.Tensor],
                        tau, reduction: str = "mean") -> torch.Tensor:
    """Point map vs image plus point map vs view caption."""
    if z_i is None or z_v is None:
        raise InvalidArgumentError("view alignment needs point map, image and caption embeddings")
    return info_nce(z_p, z_i, tau, reduction) + info_nce(z_p, z_v, tau, reduction)


def pool_views(view_embeddings: torch.Tensor) -> torch.Tensor:
    """Mean of per-view unit vectors, re-normalised."""
    if len(view_embeddings) == 0:
        raise InvalidArgumentError("scene has no views")
    return F.normalize(view_embeddings.mean(dim=0), dim=-1)


def scene_alignment_loss(zbar_p: torch.Tensor, zbar_i: Optional[torch.Tensor],
                         zbar_s: Optional[torch.Tensor], tau, reduction: str = "mean") -> torch.Tensor:
    """Pooled point map vs pooled image plus pooled point map vs scene caption, across scenes."""
    if zbar_i is None or zbar_s is None:
        raise InvalidArgumentError("scene alignment needs pooled image and scene caption embeddings")
    return info_nce(zbar_p, zbar_i, tau, reduction) + info_nce(zbar_p, zbar_s, tau, reduction)


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(dim=-1)


def chamfer_jepa(pred: torch.Tensor, target: torch.Tensor, average: bool = False) -> torch.Tensor:
    """Symmetric nearest-neighbour squared distance between two embedding sets.

    Sums over both sides by default; ``average=True`` takes means instead. The
    target side is detached.
    """
    target = target.detach()
    if len(pred) == 0 and len(target) == 0:
        warnings.warn("chamfer_jepa called with two empty sets; returning 0", RuntimeWarning)
        return pred.new_zeros(())
    if len(pred) == 0 or len(target) == 0:
        raise InvalidArgumentError("chamfer_jepa needs both sets non-empty")
    d = _sq_dists(pred, target)
    fwd, bwd = d.min(dim=1).values, d.min(dim=0).values
    if average:
        return fwd.mean() + bwd.mean()
    return fwd.sum() + bwd.sum()


def mse_jepa(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Element-wise mean squared error under a fixed ordering."""
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"length mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target.detach()) ** 2).mean()


def jepa_loss(pred: torch.Tensor, target: torch.Tensor, mode: str = "chamfer") -> torch.Tensor:
    if mode == "chamfer":
        return chamfer_jepa(pred, target)
    if mode == "chamfer_mean":
        return chamfer_jepa(pred, target, average=True)
    if mode == "mse":
        return mse_jepa(pred, target)
    raise InvalidArgumentError(f"unknown jepa mode {mode!r}")


_STAGE_PARTS = {"warmup": ("view",), "main": ("view", "scene", "pjepa")}


def total_loss(stage: str, parts: Mapping[str, torch.Tensor | float]):
    if stage not in _STAGE_PARTS:
        raise InvalidArgumentError(f"unknown stage {stage!r}")
    needed = _STAGE_PARTS[stage]
    missing = [p for p in needed if parts.get(p) is None]
    if missing:
        raise InvalidArgumentError(f"stage {stage} is missing loss parts: {missing}")
    out = parts[needed[0]]
    for p in needed[1:]:
        out = out + parts[p]
    return out


def clamp_log_tau(log_tau: torch.Tensor) -> torch.Tensor:
    lo, hi = TAU_RANGE
    return log_tau.clamp(torch.log(torch.tensor(lo)).item(), torch.log(torch.tensor(hi)).item())


def pooled(groups: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.stack([pool_views(g) for g in groups])
