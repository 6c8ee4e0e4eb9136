"""Attentional graph network over a pair of subgraphs.

Descriptors are lifted with a positional MLP, then refined by ``L`` layers,
each an intra-subgraph attention step followed by an inter-subgraph one.
All node updates within a step read the pre-step features of both sides.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .numerics import DEFAULT_DTYPE, DimensionError, Linear, MaskedMLP, masked_softmax

POS_ENCODER_HIDDEN = (32, 64, 128)
FINAL_LAYER_SCALE = 0.1


@dataclass
class SubgraphTensor:
    """Padded batch of subgraphs: ``x`` (B, E, N), ``p`` (B, 3, N), ``mask`` (B, N)."""

    x: torch.Tensor
    p: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.x.dim() == 2:
            self.x, self.p, self.mask = self.x[None], self.p[None], self.mask[None]
        b, _, n = self.x.shape
        if self.p.shape != (b, 3, n) or self.mask.shape != (b, n):
            raise DimensionError(
                f"inconsistent shapes x={tuple(self.x.shape)} p={tuple(self.p.shape)} "
                f"mask={tuple(self.mask.shape)}"
            )

    @property
    def num_nodes(self) -> int:
        return self.x.shape[-1]

    def pad_to(self, n: int) -> "SubgraphTensor":
        extra = n - self.num_nodes
        if extra < 0:
            raise DimensionError("cannot pad to fewer columns")
        if extra == 0:
            return self
        pad = torch.nn.functional.pad
        return SubgraphTensor(pad(self.x, (0, extra)), pad(self.p, (0, extra)), pad(self.mask, (0, extra)))

    @classmethod
    def from_arrays(cls, d: np.ndarray, p: np.ndarray, dtype: torch.dtype = DEFAULT_DTYPE) -> "SubgraphTensor":
        """Single subgraph from node-major arrays ``d`` (N, E) and ``p`` (N, 3)."""
        x = torch.as_tensor(np.asarray(d).T, dtype=dtype)
        pp = torch.as_tensor(np.asarray(p).T, dtype=dtype)
        return cls(x, pp, torch.ones(x.shape[1], dtype=torch.bool))


def _zero_masked(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.where(mask.unsqueeze(-2), x, x.new_zeros(()))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; head ``h`` owns rows ``h*d_k:(h+1)*d_k``."""

    def __init__(self, dim: int, heads: int, dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        if dim % heads:
            raise DimensionError(f"feature dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.d_k = dim, heads, dim // heads
        self.query = Linear(dim, dim, dtype=dtype)
        self.key = Linear(dim, dim, dtype=dtype)
        self.value = Linear(dim, dim, dtype=dtype)
        self.merge = Linear(dim, dim, dtype=dtype)

    def weights(self, x_r, x_s, mask_s) -> torch.Tensor:
        """Attention probabilities of shape (B, heads, N_R, N_S)."""
        b = x_r.shape[0]
        q = self.query(x_r).view(b, self.heads, self.d_k, -1)
        k = self.key(x_s).view(b, self.heads, self.d_k, -1)
        scores = torch.einsum("bhdn,bhdm->bhnm", q, k) / self.d_k**0.5
        return masked_softmax(scores, mask_s[:, None, :])

    def forward(self, x_r, mask_r, x_s, mask_s) -> torch.Tensor:
        b = x_r.shape[0]
        prob = self.weights(x_r, x_s, mask_s)
        v = self.value(x_s).view(b, self.heads, self.d_k, -1)
        msg = torch.einsum("bhnm,bhdm->bhdn", prob, v).reshape(b, self.dim, -1)
        return _zero_masked(self.merge(msg), mask_r)


class AttentionBlock(nn.Module):
    """Residual message update ``x <- x + MLP([x || m])``."""

    def __init__(self, dim: int, heads: int, dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, dtype=dtype)
        self.mlp = MaskedMLP([2 * dim, 2 * dim, dim], dtype=dtype)

    def forward(self, x_r, mask_r, x_s, mask_s) -> torch.Tensor:
        msg = self.attn(x_r, mask_r, x_s, mask_s)
        return x_r + self.mlp(torch.cat([x_r, msg], dim=-2), mask_r)


class PGATLayer(nn.Module):
    def __init__(self, dim: int, heads: int, dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        self.intra = AttentionBlock(dim, heads, dtype=dtype)
        self.inter = AttentionBlock(dim, heads, dtype=dtype)


class PGAT(nn.Module):
    def __init__(
        self,
        dim: int = 256,
        num_layers: int = 9,
        heads: int = 4,
        dtype: torch.dtype = DEFAULT_DTYPE,
        seed: int | None = 0,
    ):
        super().__init__()
        if num_layers < 0 or heads < 1:
            raise ValueError("need num_layers >= 0 and heads >= 1")
        if dim % heads:
            raise DimensionError(f"feature dim {dim} not divisible by {heads} heads")
        self.dim, self.num_layers, self.heads = dim, num_layers, heads
        self.pos_encoder = MaskedMLP([3, *POS_ENCODER_HIDDEN, dim], dtype=dtype)
        self.layers = nn.ModuleList(PGATLayer(dim, heads, dtype=dtype) for _ in range(num_layers))
        if seed is not None:
            self.reset_parameters(seed)

    @property
    def dtype(self) -> torch.dtype:
        return self.pos_encoder.last.weight.dtype

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for mod in self.modules():
            if isinstance(mod, Linear):
                mod.reset_parameters(generator=gen)
        for layer in self.layers:
            for block in (layer.intra, layer.inter):
                block.attn.merge.reset_parameters(FINAL_LAYER_SCALE, gen)
                block.mlp.last.reset_parameters(FINAL_LAYER_SCALE, gen)

    def encode(self, g: SubgraphTensor) -> torch.Tensor:
        return encode_and_fuse(g.x, g.p, g.mask, self)

    def forward(self, a: SubgraphTensor, b: SubgraphTensor) -> tuple[torch.Tensor, torch.Tensor]:
        return pgat_forward(a, b, self)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def encode_and_fuse(d: torch.Tensor, p: torch.Tensor, mask: torch.Tensor, model: PGAT) -> torch.Tensor:
    """Descriptors plus the positional MLP applied to normalized positions."""
    if d.shape[-2] != model.dim or p.shape[-2] != 3 or d.shape[-1] != p.shape[-1]:
        raise DimensionError(
            f"descriptor {tuple(d.shape)} / position {tuple(p.shape)} mismatch for E={model.dim}"
        )
    return _zero_masked(d, mask) + model.pos_encoder(p, mask)


def attention_block(x_r, mask_r, x_s, mask_s, block: AttentionBlock) -> torch.Tensor:
    return block(x_r, mask_r, x_s, mask_s)


def pgat_forward(a: SubgraphTensor, b: SubgraphTensor, model: PGAT) -> tuple[torch.Tensor, torch.Tensor]:
    """Refined descriptors ``(F_A, F_B)`` in the padded layout of the inputs.

    Both sides are padded to a common width internally and stacked so each
    attention step is one batched call; padding never reaches valid columns.
    """
    if a.x.shape[0] != b.x.shape[0]:
        raise DimensionError("A and B batches differ in size")
    na, nb = a.num_nodes, b.num_nodes
    n = max(na, nb)
    a, b = a.pad_to(n), b.pad_to(n)
    bs = a.x.shape[0]
    x = torch.cat([model.encode(a), model.encode(b)], dim=0)
    mask = torch.cat([a.mask, b.mask], dim=0)
    swap = torch.cat([torch.arange(bs, 2 * bs), torch.arange(bs)])
    mask_swapped = mask[swap]
    for layer in model.layers:
        x = layer.intra(x, mask, x, mask)
        x = layer.inter(x, mask, x[swap], mask_swapped)
    return x[:bs, :, :na], x[bs:, :, :nb]


# -- checkpoints ------------------------------------------------------------
#
# Layout (little-endian):
#   b"PGAT" | u32 version | u32 E | u32 L | u32 heads | u32 tensor count
#   | float64 data of every tensor in state_dict order
#   | 32-byte SHA-256 of everything before it
# The manifest next to it (``<path>.manifest``) lists "name shape" lines.

MAGIC = b"PGAT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class CheckpointError(IOError):
    """Checkpoint file is missing, corrupt or incompatible."""


def manifest_lines(model: PGAT) -> list[str]:
    lines = [f"PGAT checkpoint v{FORMAT_VERSION} E={model.dim} L={model.num_layers} heads={model.heads}"]
    for name, t in model.state_dict().items():
        lines.append(f"{name} {'x'.join(str(s) for s in t.shape)}")
    return lines


def save_checkpoint(model: PGAT, path: str | Path) -> None:
    path = Path(path)
    state = model.state_dict()
    body = bytearray(
        _HEADER.pack(MAGIC, FORMAT_VERSION, model.dim, model.num_layers, model.heads, len(state))
    )
    for t in state.values():
        body += t.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes()
    body += hashlib.sha256(body).digest()
    try:
        path.write_bytes(bytes(body))
        Path(str(path) + ".manifest").write_text("\n".join(manifest_lines(model)) + "\n")
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path, dtype: torch.dtype = DEFAULT_DTYPE) -> PGAT:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEADER.size + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    magic, version, dim, num_layers, heads, count = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a PGAT checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    model = PGAT(dim, num_layers, heads, dtype=dtype, seed=None)
    state = model.state_dict()
    if count != len(state):
        raise CheckpointError(f"{path}: expected {len(state)} tensors, found {count}")
    offset = _HEADER.size
    loaded = {}
    for name, t in state.items():
        nbytes = t.numel() * 8
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated at tensor {name}")
        arr = np.frombuffer(body, dtype="<f8", count=t.numel(), offset=offset).reshape(t.shape)
        loaded[name] = torch.from_numpy(arr.copy()).to(dtype)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensors")
    model.load_state_dict(loaded)
    return model


def parameter_vector(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def stack_subgraphs(items: Sequence[tuple[np.ndarray, np.ndarray]], n: int | None = None,
                    dtype: torch.dtype = DEFAULT_DTYPE) -> SubgraphTensor:
    """Pad node-major ``(d, p)`` arrays to ``n`` columns and stack them."""
    n = n or max(len(d) for d, _ in items)
    dim = items[0][0].shape[1]
    x = torch.zeros(len(items), dim, n, dtype=dtype)
    p = torch.zeros(len(items), 3, n, dtype=dtype)
    mask = torch.zeros(len(items), n, dtype=torch.bool)
    for i, (d, pos) in enumerate(items):
        if d.shape[1] != dim:
            raise DimensionError(f"descriptor dim {d.shape[1]} != {dim}")
        k = len(d)
        x[i, :, :k] = torch.as_tensor(d.T, dtype=dtype)
        p[i, :, :k] = torch.as_tensor(np.asarray(pos).T, dtype=dtype)
        mask[i, :k] = True
    return SubgraphTensor(x, p, mask)
