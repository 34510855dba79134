"""Reconstruction and dual triplet objectives."""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ShapeMismatch


def reconstruction_loss(target: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element (pixels and channels)."""
    if target.shape != recon.shape:
        raise ShapeMismatch(f"target {tuple(target.shape)} vs reconstruction {tuple(recon.shape)}")
    return ((target - recon) ** 2).mean()


def _maybe_normalize(*zs, normalize: bool):
    return tuple(F.normalize(z, dim=-1) for z in zs) if normalize else zs


def triplet_term(z_a, z_p, z_n, margin: float = 1.0) -> torch.Tensor:
    """``max(0, |a - p| - |a - n| + margin)`` per row (Euclidean distances)."""
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    d_ap = torch.linalg.vector_norm(z_a - z_p, dim=-1)
    d_an = torch.linalg.vector_norm(z_a - z_n, dim=-1)
    return torch.clamp(d_ap - d_an + margin, min=0.0)


def dual_triplet_loss(z_a, z_p, z_intra, z_cross, margin: float = 1.0,
                      normalize: bool = False, reduction: str = "mean") -> torch.Tensor:
    """Intra-writer plus cross-writer triplet hinge, averaged over the batch.

    ``z_intra`` is a forgery of the anchor's writer, ``z_cross`` a genuine
    signature of another writer. Embeddings are used as-is unless
    ``normalize`` is set.
    """
    z_a, z_p, z_intra, z_cross = _maybe_normalize(z_a, z_p, z_intra, z_cross, normalize=normalize)
    per = triplet_term(z_a, z_p, z_intra, margin) + triplet_term(z_a, z_p, z_cross, margin)
    if reduction == "mean":
        return per.mean()
    if reduction == "sum":
        return per.sum()
    return per
