"""Dense kernels shared by the network: linear maps, masked normalization,
masked softmax, and a finite-difference gradient checker.

Feature matrices follow the ``(..., E, N)`` layout: features along rows,
nodes along columns, with an optional leading batch dimension. Node masks
are boolean tensors of shape ``(..., N)`` where ``True`` marks a real node.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
from torch import nn

DEFAULT_DTYPE = torch.float64

# per-precision tolerances used by the verification suites
TOLERANCES = {
    torch.float64: {"grad_rel": 1e-4, "fd_eps": 1e-5, "exact": 1e-12},
    torch.float32: {"grad_rel": 5e-2, "fd_eps": 1e-3, "exact": 1e-5},
}


class DimensionError(ValueError):
    """Operand shapes are inconsistent."""


class DegenerateInputError(ValueError):
    """Input has no valid entries to operate on (e.g. an all-false mask)."""


class GradientPropagationError(FloatingPointError):
    """A loss evaluated during gradient checking was not finite."""


def linear_forward(weight: torch.Tensor, bias: torch.Tensor | None, x: torch.Tensor) -> torch.Tensor:
    """Apply ``weight @ x[..., :, j] + bias`` to every column of ``x``."""
    if weight.dim() != 2:
        raise DimensionError(f"weight must be 2-D, got shape {tuple(weight.shape)}")
    if x.shape[-2] != weight.shape[1]:
        raise DimensionError(
            f"input has {x.shape[-2]} rows but weight expects {weight.shape[1]}"
        )
    y = torch.matmul(weight, x)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
        y = y + bias[:, None]
    return y


def _check_mask(x: torch.Tensor, mask: torch.Tensor, what: str) -> None:
    if mask.dtype != torch.bool:
        raise TypeError(f"{what} must be a boolean tensor")
    if mask.shape != x.shape[:-2] + x.shape[-1:]:
        raise DimensionError(
            f"{what} shape {tuple(mask.shape)} does not match columns of {tuple(x.shape)}"
        )


def masked_layer_norm(
    x: torch.Tensor,
    mask: torch.Tensor,
    gamma: torch.Tensor | None = None,
    beta: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Per-feature normalization over the valid node columns of each subgraph.

    Mean and variance for feature ``e`` are taken over the columns where
    ``mask`` is true; padded columns never enter the statistics and come out
    as zeros. Values stored in padded columns (even NaN/inf) cannot leak into
    the result because they are replaced before any arithmetic.
    """
    _check_mask(x, mask, "mask")
    if eps <= 0:
        raise ValueError("eps must be positive")
    count = mask.sum(dim=-1)
    if bool((count == 0).any()):
        raise DegenerateInputError("masked_layer_norm needs at least one valid column")
    m = mask.unsqueeze(-2)
    zero = x.new_zeros(())
    xv = torch.where(m, x, zero)
    n = count.to(x.dtype).unsqueeze(-1).unsqueeze(-1)
    mean = xv.sum(dim=-1, keepdim=True) / n
    centered = torch.where(m, xv - mean, zero)
    var = (centered * centered).sum(dim=-1, keepdim=True) / n
    y = centered / torch.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma[:, None]
    if beta is not None:
        y = y + beta[:, None]
    return torch.where(m, y, zero)


def masked_softmax(scores: torch.Tensor, sender_mask: torch.Tensor) -> torch.Tensor:
    """Row softmax over the last axis restricted to unmasked senders.

    ``sender_mask`` has shape ``(..., N_S)`` and is broadcast over rows.
    Masked columns are exactly zero.
    """
    if sender_mask.dtype != torch.bool:
        raise TypeError("sender_mask must be a boolean tensor")
    if sender_mask.shape[-1] != scores.shape[-1]:
        raise DimensionError("sender_mask length does not match score columns")
    if bool((~sender_mask.any(dim=-1)).any()):
        raise DegenerateInputError("all senders are masked")
    m = sender_mask.unsqueeze(-2)
    filled = scores.masked_fill(~m, torch.finfo(scores.dtype).min)
    shifted = filled - filled.amax(dim=-1, keepdim=True)
    e = torch.where(m, torch.exp(shifted), scores.new_zeros(()))
    return e / e.sum(dim=-1, keepdim=True)


class Linear(nn.Module):
    """Column-wise affine map on ``(..., in, N)`` tensors."""

    def __init__(self, in_dim: int, out_dim: int, dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=dtype))
        self.reset_parameters()

    def reset_parameters(self, scale: float = 1.0, generator: torch.Generator | None = None) -> None:
        bound = scale / math.sqrt(self.in_dim)
        with torch.no_grad():
            self.weight.uniform_(-bound, bound, generator=generator)
            self.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear_forward(self.weight, self.bias, x)


class MaskedNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(dim, dtype=dtype))
        self.beta = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return masked_layer_norm(x, mask, self.gamma, self.beta, self.eps)


class MaskedMLP(nn.Module):
    """Stack of linear layers with masked norm + ReLU between them.

    Nothing follows the last layer. Output columns where ``mask`` is false
    are zero.
    """

    def __init__(self, channels: Sequence[int], dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        if len(channels) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.channels = list(channels)
        self.linears = nn.ModuleList(
            Linear(a, b, dtype=dtype) for a, b in zip(channels[:-1], channels[1:])
        )
        self.norms = nn.ModuleList(MaskedNorm(c, dtype=dtype) for c in channels[1:-1])

    @property
    def last(self) -> Linear:
        return self.linears[-1]

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        for i, lin in enumerate(self.linears):
            x = lin(x)
            if i < len(self.norms):
                x = torch.relu(self.norms[i](x, mask))
        return torch.where(mask.unsqueeze(-2), x, x.new_zeros(()))


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error between analytic and numeric gradients."""

    epsilon: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> torch.Tensor:
    denom = torch.maximum(torch.ones_like(analytic), torch.maximum(analytic.abs(), numeric.abs()))
    return (analytic - numeric).abs() / denom


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[tuple[str, torch.Tensor]],
    epsilon: float = 1e-5,
    max_entries: int | None = None,
    generator: torch.Generator | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn`` with central differences.

    ``params`` are ``(name, tensor)`` pairs of leaf tensors that ``loss_fn``
    reads on every call. Entries are perturbed in place and restored. When
    ``max_entries`` is given, at most that many entries per tensor are probed
    (chosen with ``generator``).
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise GradientPropagationError(f"loss is not finite: {loss.item()}")
    tensors = [p for _, p in params]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)

    report = GradCheckReport(epsilon=epsilon)
    with torch.no_grad():
        for (name, p), g in zip(params, grads):
            analytic = (torch.zeros_like(p) if g is None else g.detach()).reshape(-1)
            flat = p.view(-1)
            idx = torch.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = torch.randperm(flat.numel(), generator=generator)[:max_entries]
            worst = 0.0
            for k in idx.tolist():
                orig = flat[k].item()
                flat[k] = orig + epsilon
                up = loss_fn()
                flat[k] = orig - epsilon
                down = loss_fn()
                flat[k] = orig
                if not (torch.isfinite(up) and torch.isfinite(down)):
                    raise GradientPropagationError(f"non-finite loss while probing {name}[{k}]")
                numeric = (up - down) / (2 * epsilon)
                err = relative_error(analytic[k], numeric).item()
                worst = max(worst, err)
            report.errors[name] = worst
    return report
