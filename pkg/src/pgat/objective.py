"""Cosine similarity, shifted probabilities and the weighted BCE loss."""
from __future__ import annotations

import torch

from .numerics import DegenerateInputError, DimensionError

PROB_EPS = 1e-7
NORM_FLOOR = 1e-12


class DegenerateDescriptorError(DegenerateInputError):
    """A descriptor column has (numerically) zero norm."""


def _unit_columns(f: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    norm = f.norm(dim=-2, keepdim=True)
    valid = torch.ones_like(norm, dtype=torch.bool) if mask is None else mask.unsqueeze(-2)
    if bool(((norm < NORM_FLOOR) & valid).any()):
        raise DegenerateDescriptorError("descriptor column with norm below 1e-12")
    safe = torch.where(valid, norm, torch.ones_like(norm))
    return torch.where(valid, f / safe, f.new_zeros(()))


def similarity_matrix(
    fa: torch.Tensor,
    fb: torch.Tensor,
    mask_a: torch.Tensor | None = None,
    mask_b: torch.Tensor | None = None,
) -> torch.Tensor:
    """Cosine similarity between columns: ``(..., E, N) x (..., E, M) -> (..., N, M)``.

    Entries involving a masked column are zero.
    """
    if fa.shape[-2] != fb.shape[-2]:
        raise DimensionError(f"feature dims differ: {fa.shape[-2]} vs {fb.shape[-2]}")
    ua = _unit_columns(fa, mask_a)
    ub = _unit_columns(fb, mask_b)
    return torch.matmul(ua.transpose(-1, -2), ub)


def to_probability(s: torch.Tensor) -> torch.Tensor:
    return s * 0.5 + 0.5


def weighted_bce(p: torch.Tensor, y: torch.Tensor, omega: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Summed binary cross-entropy gated by ``omega``, and the active-pair count.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before the logs.
    """
    if not (p.shape == y.shape == omega.shape):
        raise DimensionError(f"shapes differ: p={tuple(p.shape)} y={tuple(y.shape)} w={tuple(omega.shape)}")
    pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    terms = y * torch.log(pc) + (1.0 - y) * torch.log1p(-pc)
    loss = -(omega * terms).sum()
    return loss, int(torch.count_nonzero(omega))
