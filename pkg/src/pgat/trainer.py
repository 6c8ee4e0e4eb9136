"""Pair sampling, padded batches, Adam and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import yaml

from .agnn import PGAT, SubgraphTensor, save_checkpoint, stack_subgraphs
from .numerics import DimensionError
from .objective import similarity_matrix, to_probability, weighted_bce
from .pose_graph import DatasetError, Subgraph, Trajectory, build_subgraphs, pair_labels

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "step", "mean_active_loss", "active_pairs", "wall_time_s"]
PRECISIONS = {"float64": torch.float64, "float32": torch.float32}


class TrainingError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 256
    epochs: int = 1500
    max_steps: int | None = None
    positive_rate: float = 0.30
    d_pos: float = 10.0
    d_neg: float = 50.0
    distance_threshold: float = 200.0
    dim: int = 256
    num_layers: int = 9
    heads: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    normalize_loss: bool = True
    class_balance: bool = False
    precision: str = "float64"
    deterministic: bool = True

    def __post_init__(self):
        if not 0.0 <= self.positive_rate <= 1.0:
            raise ValueError("positive_rate must lie in [0, 1]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.d_pos > self.d_neg:
            raise ValueError("d_pos must not exceed d_neg")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a flat key/value mapping")
        return cls.from_mapping(data)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(asdict(self), sort_keys=False))


# -- sampling ---------------------------------------------------------------

class PairSampler:
    """Draws subgraph pairs, forcing a positive pair with ``positive_rate``.

    A pair is positive when some keynode of one subgraph lies closer than
    ``d_pos`` to some keynode of the other (shared keynodes count).
    """

    def __init__(self, subgraphs: Sequence[Subgraph], d_pos: float):
        if len(subgraphs) < 2:
            raise SamplingError("need at least two subgraphs to sample pairs")
        self.subgraphs = list(subgraphs)
        self.positive_pairs = positive_pair_index(self.subgraphs, d_pos)

    def sample(self, positive_rate: float, rng: np.random.Generator) -> tuple[Subgraph, Subgraph, bool]:
        forced = bool(rng.random() < positive_rate)
        if forced:
            if len(self.positive_pairs) == 0:
                raise SamplingError("positive draw requested but no positive subgraph pairs exist")
            i, j = self.positive_pairs[rng.integers(len(self.positive_pairs))]
            if rng.random() < 0.5:
                i, j = j, i
        else:
            i = int(rng.integers(len(self.subgraphs)))
            j = int(rng.integers(len(self.subgraphs) - 1))
            j += j >= i
        return self.subgraphs[i], self.subgraphs[j], forced


def positive_pair_index(subgraphs: Sequence[Subgraph], d_pos: float) -> np.ndarray:
    """Unordered index pairs ``(i, j)``, ``i < j``, of positive subgraph pairs."""
    ids = sorted({int(g) for sg in subgraphs for g in sg.ids})
    col = {g: k for k, g in enumerate(ids)}
    pos = np.zeros((len(ids), 3))
    for sg in subgraphs:
        for g, t in zip(sg.ids, sg.t):
            pos[col[int(g)]] = t
    near = np.zeros((len(ids), len(ids)), dtype=bool)
    for start in range(0, len(ids), 1024):
        blk = pos[start:start + 1024]
        near[start:start + 1024] = np.linalg.norm(blk[:, None] - pos[None], axis=-1) < d_pos
    np.fill_diagonal(near, True)
    member = np.zeros((len(subgraphs), len(ids)))
    for k, sg in enumerate(subgraphs):
        member[k, [col[int(g)] for g in sg.ids]] = 1.0
    linked = (member @ near.astype(float) @ member.T) > 0
    i, j = np.nonzero(np.triu(linked, k=1))
    return np.stack([i, j], axis=1)


def sample_pair(sampler: PairSampler, positive_rate: float, rng: np.random.Generator):
    a, b, _ = sampler.sample(positive_rate, rng)
    return a, b


# -- batches ----------------------------------------------------------------

@dataclass
class PairBatch:
    a: SubgraphTensor
    b: SubgraphTensor
    y: torch.Tensor  # (B, N, N)
    omega: torch.Tensor  # (B, N, N)
    pairs: list[tuple[Subgraph, Subgraph]] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return self.y.shape[0]


def make_batch(
    pairs: Sequence[tuple[Subgraph, Subgraph]],
    d_pos: float = 10.0,
    d_neg: float = 50.0,
    dtype: torch.dtype = torch.float64,
    pad_to: int | None = None,
) -> PairBatch:
    """Pad every subgraph to the batch's largest node count and label each pair."""
    if not pairs:
        raise ValueError("make_batch needs at least one pair")
    dims = {sg.d.shape[1] for pair in pairs for sg in pair}
    if len(dims) != 1:
        raise DatasetError(f"descriptor dimensions differ across the batch: {sorted(dims)}")
    n = max(len(sg) for pair in pairs for sg in pair)
    if pad_to is not None:
        if pad_to < n:
            raise DimensionError(f"pad_to={pad_to} is smaller than the largest subgraph ({n})")
        n = pad_to
    a = stack_subgraphs([(x.d, x.p) for x, _ in pairs], n, dtype=dtype)
    b = stack_subgraphs([(x.d, x.p) for _, x in pairs], n, dtype=dtype)
    y = torch.zeros(len(pairs), n, n, dtype=dtype)
    omega = torch.zeros(len(pairs), n, n, dtype=dtype)
    for k, (sa, sb) in enumerate(pairs):
        lab = pair_labels(sa, sb, d_pos, d_neg)
        y[k, :len(sa), :len(sb)] = torch.as_tensor(lab.y, dtype=dtype)
        omega[k, :len(sa), :len(sb)] = torch.as_tensor(lab.omega, dtype=dtype)
    return PairBatch(a, b, y, omega, list(pairs))


def balance_omega(y: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """Reweight active pairs so positives and negatives carry equal total mass.

    The total weight stays equal to the active count, so a per-active-pair
    mean is still on the usual scale. Batches holding only one class are
    returned unchanged.
    """
    active = omega > 0
    pos = active & (y > 0.5)
    neg = active & ~pos
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        return omega
    total = n_pos + n_neg
    w = torch.zeros_like(omega)
    w[pos] = total / (2.0 * n_pos)
    w[neg] = total / (2.0 * n_neg)
    return w * omega


def batch_loss(model: PGAT, batch: PairBatch) -> tuple[torch.Tensor, int]:
    """Summed weighted BCE over every pair in the batch and its active count."""
    fa, fb = model(batch.a, batch.b)
    s = similarity_matrix(fa, fb, batch.a.mask, batch.b.mask)
    return weighted_bce(to_probability(s), batch.y, batch.omega)


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update applied to ``params`` in place."""
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            if m.shape != p.shape or g.shape != p.shape:
                raise DimensionError(f"shape mismatch for parameter {name}")
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)
    return state


def optimize_step(model: PGAT, batch: PairBatch, state: AdamState, config: TrainConfig) -> tuple[float, int]:
    loss, active = batch_loss(model, batch)
    scaled = loss / active if (config.normalize_loss and active) else loss
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(scaled, list(params.values()), allow_unused=True)
    adam_step(params, dict(zip(params, grads)), state, config.learning_rate,
              (config.beta1, config.beta2), config.adam_eps)
    return float(loss.detach()), active


# -- training loop ----------------------------------------------------------

@dataclass
class TrainResult:
    model: PGAT
    metrics: list[dict]
    state: AdamState


def dataset_subgraphs(trajectories: Sequence[Trajectory], distance_threshold: float) -> list[Subgraph]:
    out = []
    for traj in trajectories:
        out.extend(build_subgraphs(traj, distance_threshold))
    return out


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch,)))


def train(
    config: TrainConfig,
    trajectories: Sequence[Trajectory],
    out_dir: str | Path | None = None,
    model: PGAT | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Fixed-length training run.

    One epoch draws ``ceil(#subgraphs / batch_size)`` batches. With
    ``out_dir`` set, ``init.pgat``, ``last.pgat``, ``best.pgat`` and
    ``metrics.csv`` are written there; ``last``/``best`` after every epoch.
    Under ``deterministic`` the wall-time column is written as 0.
    """
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    subgraphs = dataset_subgraphs(trajectories, config.distance_threshold)
    dims = {sg.d.shape[1] for sg in subgraphs}
    if dims != {config.dim}:
        raise DatasetError(f"descriptor dims {sorted(dims)} do not match configured E={config.dim}")
    sampler = PairSampler(subgraphs, config.d_pos)
    if model is None:
        model = PGAT(config.dim, config.num_layers, config.heads, dtype=config.dtype, seed=config.seed)
    model.train()
    state = AdamState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "init.pgat")

    per_epoch = math.ceil(len(subgraphs) / config.batch_size)
    metrics: list[dict] = []
    best = math.inf
    start = time.perf_counter()
    for epoch in range(config.epochs):
        if config.max_steps is not None and state.step >= config.max_steps:
            break
        rng = epoch_rng(config.seed, epoch)
        loss_sum, active_sum = 0.0, 0
        for _ in range(per_epoch):
            if config.max_steps is not None and state.step >= config.max_steps:
                break
            pairs = [sample_pair(sampler, config.positive_rate, rng) for _ in range(config.batch_size)]
            batch = make_batch(pairs, config.d_pos, config.d_neg, dtype=config.dtype)
            if config.class_balance:
                batch.omega = balance_omega(batch.y, batch.omega)
            loss, active = optimize_step(model, batch, state, config)
            loss_sum += loss
            active_sum += active
        row = {
            "epoch": epoch,
            "step": state.step,
            "mean_active_loss": loss_sum / active_sum if active_sum else 0.0,
            "active_pairs": active_sum,
            "wall_time_s": 0.0 if config.deterministic else time.perf_counter() - start,
        }
        metrics.append(row)
        log.info("epoch %d step %d loss %.5f", epoch, state.step, row["mean_active_loss"])
        if on_epoch is not None:
            on_epoch(row)
        if out is not None:
            save_checkpoint(model, out / "last.pgat")
            if row["mean_active_loss"] < best:
                best = row["mean_active_loss"]
                save_checkpoint(model, out / "best.pgat")
            write_metrics(out / "metrics.csv", metrics)
    if out is not None:
        save_checkpoint(model, out / "last.pgat")
        if not metrics:
            save_checkpoint(model, out / "best.pgat")
        write_metrics(out / "metrics.csv", metrics)
    return TrainResult(model, metrics, state)


def write_metrics(path: str | Path, rows: Sequence[dict]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r["epoch"], r["step"], f"{r['mean_active_loss']:.17g}", r["active_pairs"],
                        f"{r['wall_time_s']:.3f}"])
