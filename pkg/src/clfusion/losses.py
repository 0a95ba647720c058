"""Training objectives: denoising loss, view-consistency L2, identity triplet."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch


@dataclass
class LossWeights:
    lambda_diff: float = 1.0
    lambda_contrast: float = 1.0
    margin: float = 0.5

    def __post_init__(self):
        if self.lambda_diff < 0:
            raise ValueError(f"lambda_diff must be >= 0, got {self.lambda_diff!r}")
        if self.lambda_contrast < 0:
            raise ValueError(f"lambda_contrast must be >= 0, got {self.lambda_contrast!r}")
        if not self.margin > 0:
            raise ValueError(f"margin must be > 0, got {self.margin!r}")


@dataclass
class LossReport:
    l_diff: float
    l_2: float
    l_tri: float
    l_contrast: float
    l_total: float

    def to_dict(self) -> dict:
        return asdict(self)


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def diffusion_loss(pred, target, param_kind: str = "predict_w0") -> torch.Tensor:
    """Mean squared error over batch and latent dimensions.

    ``target`` is the clean latent for ``predict_w0`` and the injected noise
    for ``predict_eps``; the reduction is the same either way.
    """
    if param_kind not in ("predict_w0", "predict_eps"):
        raise ValueError(f"unknown param_kind {param_kind!r}")
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"diffusion_loss: shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((target - pred) ** 2).mean()


def pairwise_sq_dists(preds: torch.Tensor) -> torch.Tensor:
    """Squared L2 distances between all views: ``(..., k, D) -> (..., k, k)``."""
    diff = preds.unsqueeze(-2) - preds.unsqueeze(-3)
    return (diff**2).sum(-1)


def l2_view_loss(preds, valid=None) -> torch.Tensor:
    """Mean squared distance over unordered pairs of views of one identity.

    ``preds`` is ``(k, D)`` for one identity or ``(n, k, D)`` for a batch.
    ``valid`` optionally masks views out, shape ``(k,)`` or ``(n, k)``.
    The mean runs over every valid pair in the batch.
    """
    preds = _as_tensor(preds)
    if preds.dim() == 2:
        preds = preds.unsqueeze(0)
        valid = None if valid is None else _as_tensor(valid).unsqueeze(0)
    n, k, _ = preds.shape
    if valid is None:
        if k < 2:
            raise ValueError(f"l2_view_loss needs at least 2 views, got {k}")
        valid = torch.ones(n, k, dtype=torch.bool, device=preds.device)
    valid = valid.to(torch.bool)
    upper = torch.triu(torch.ones(k, k, dtype=torch.bool, device=preds.device), diagonal=1)
    pair_mask = valid.unsqueeze(-1) & valid.unsqueeze(-2) & upper
    n_pairs = int(pair_mask.sum())
    if n_pairs == 0:
        return preds.sum() * 0.0
    return pairwise_sq_dists(preds)[pair_mask].sum() / n_pairs


def triplet_distances(anchor, positive, negative) -> tuple[torch.Tensor, torch.Tensor]:
    """Un-squared L2 distances anchor-positive and anchor-negative along the last axis."""
    anchor, positive, negative = map(_as_tensor, (anchor, positive, negative))
    if not anchor.shape == positive.shape == negative.shape:
        raise ValueError(
            "triplet_distances: shape mismatch "
            f"{tuple(anchor.shape)}, {tuple(positive.shape)}, {tuple(negative.shape)}"
        )
    d_pos = torch.linalg.vector_norm(anchor - positive, dim=-1)
    d_neg = torch.linalg.vector_norm(anchor - negative, dim=-1)
    return d_pos, d_neg


def triplet_loss(d_pos, d_neg, m: float) -> torch.Tensor:
    """Hinge ``max(0, m + d_pos - d_neg)``, element-wise."""
    if not m > 0:
        raise ValueError(f"margin must be > 0, got {m!r}")
    d_pos, d_neg = _as_tensor(d_pos), _as_tensor(d_neg)
    if bool((d_pos < 0).any()) or bool((d_neg < 0).any()):
        raise ValueError("triplet distances must be non-negative")
    return torch.clamp(m + d_pos - d_neg, min=0.0)


def weighted_total(l_diff, l_2, l_tri, weights: LossWeights):
    """``lambda_diff * l_diff + lambda_contrast * (l_2 + l_tri)``; works on tensors or floats."""
    return weights.lambda_diff * l_diff + weights.lambda_contrast * (l_2 + l_tri)


def total_loss(l_diff, l_2, l_tri, weights: LossWeights) -> LossReport:
    parts = {"l_diff": l_diff, "l_2": l_2, "l_tri": l_tri}
    values = {}
    for name, value in parts.items():
        value = float(value)
        if not math.isfinite(value):
            raise FloatingPointError(f"{name} is not finite ({value})")
        values[name] = value
    l_contrast = values["l_2"] + values["l_tri"]
    return LossReport(
        l_diff=values["l_diff"],
        l_2=values["l_2"],
        l_tri=values["l_tri"],
        l_contrast=l_contrast,
        l_total=weights.lambda_diff * values["l_diff"] + weights.lambda_contrast * l_contrast,
    )
