"""Keynode trajectories, stride-1 subgraph windows and pair supervision."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SIGMA_FLOOR = 1e-9


class DatasetError(ValueError):
    """Malformed or inconsistent keynode data."""


@dataclass(frozen=True)
class Keynode:
    global_id: int
    run_id: int
    t: np.ndarray  # (3,) metres
    d: np.ndarray  # (E,)


@dataclass
class Trajectory:
    run_id: int
    keynodes: list[Keynode]

    def __post_init__(self):
        for k in self.keynodes:
            if k.run_id != self.run_id:
                raise DatasetError(
                    f"keynode {k.global_id} has run_id {k.run_id}, expected {self.run_id}"
                )

    def __len__(self) -> int:
        return len(self.keynodes)

    @property
    def ids(self) -> np.ndarray:
        return np.array([k.global_id for k in self.keynodes], dtype=np.int64)

    @property
    def positions(self) -> np.ndarray:
        return np.stack([k.t for k in self.keynodes]) if self.keynodes else np.zeros((0, 3))

    @property
    def descriptors(self) -> np.ndarray:
        return np.stack([k.d for k in self.keynodes])


@dataclass
class Subgraph:
    """Contiguous window of one trajectory.

    ``t`` are global positions (N, 3), ``d`` descriptors (N, E) and ``p`` the
    positions normalized by the window centroid ``c`` and scatter ``sigma``.
    """

    index: int
    run_id: int
    ids: np.ndarray
    t: np.ndarray
    d: np.ndarray
    p: np.ndarray
    c: np.ndarray
    sigma: float

    def __len__(self) -> int:
        return len(self.ids)


def normalize_positions(t: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Centre positions on their centroid and scale by RMS distance to it."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] < 1:
        raise DatasetError("normalize_positions needs at least one position")
    c = t.mean(axis=0)
    sigma = float(np.sqrt(np.mean(np.sum((t - c) ** 2, axis=1))))
    if sigma < SIGMA_FLOOR:
        sigma = 1.0
    return (t - c) / sigma, c, sigma


def build_subgraphs(traj: Trajectory, distance_threshold: float, min_nodes: int = 2) -> list[Subgraph]:
    """Stride-1 windows whose along-path length stays within the threshold.

    Window ``l`` starts at node ``l`` and grows while the cumulative travel
    distance from its first node is <= ``distance_threshold``. Windows with
    fewer than ``min_nodes`` nodes are dropped.
    """
    if len(traj) == 0:
        raise DatasetError("cannot build subgraphs from an empty trajectory")
    if distance_threshold <= 0:
        raise ValueError("distance_threshold must be positive")
    pos = traj.positions
    desc = traj.descriptors
    ids = traj.ids
    step = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(step)])

    out = []
    n = len(traj)
    for start in range(n):
        end = start + 1
        while end < n and cum[end] - cum[start] <= distance_threshold:
            end += 1
        if end - start < min_nodes:
            continue
        t = pos[start:end]
        p, c, sigma = normalize_positions(t)
        out.append(
            Subgraph(
                index=start,
                run_id=traj.run_id,
                ids=ids[start:end].copy(),
                t=t.copy(),
                d=desc[start:end].copy(),
                p=p,
                c=c,
                sigma=sigma,
            )
        )
    return out


@dataclass
class PairLabels:
    y: np.ndarray  # (N, M) in {0, 1}
    omega: np.ndarray  # (N, M) weights

    @property
    def active(self) -> int:
        return int(np.count_nonzero(self.omega))


def pair_labels(
    a: Subgraph,
    b: Subgraph,
    d_pos: float = 10.0,
    d_neg: float = 50.0,
    positions: Mapping[int, np.ndarray] | None = None,
) -> PairLabels:
    """Ground truth for every keynode pair of two subgraphs.

    Pairs closer than ``d_pos`` are positive, pairs at ``d_neg`` or further
    negative, and pairs in between are excluded from the loss (omega = 0).
    A keynode paired with itself is always a positive. Global positions come
    from ``positions`` when given, otherwise from the subgraphs.
    """
    if d_pos > d_neg:
        raise ValueError("d_pos must not exceed d_neg")
    if positions is not None:
        try:
            ta = np.stack([positions[int(i)] for i in a.ids])
            tb = np.stack([positions[int(i)] for i in b.ids])
        except KeyError as exc:
            raise DatasetError(f"unknown global_id {exc.args[0]}") from None
    else:
        ta, tb = a.t, b.t
    dist = np.linalg.norm(ta[:, None, :] - tb[None, :, :], axis=-1)
    same = a.ids[:, None] == b.ids[None, :]
    pos = (dist < d_pos) | same
    neg = (dist >= d_neg) & ~same
    return PairLabels(y=pos.astype(np.float64), omega=(pos | neg).astype(np.float64))


def has_positive(a: Subgraph, b: Subgraph, d_pos: float) -> bool:
    dist = np.linalg.norm(a.t[:, None, :] - b.t[None, :, :], axis=-1)
    return bool((dist < d_pos).any() or np.intersect1d(a.ids, b.ids).size)


# -- keynode CSV ------------------------------------------------------------

def read_keynodes(path: str | Path) -> list[Trajectory]:
    """Load ``global_id,run_id,x,y,z,d0..d{E-1}`` rows into per-run trajectories.

    Row order within a run is kept; global ids must increase within a run.
    """
    path = Path(path)
    runs: dict[int, list[Keynode]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        fixed = ["global_id", "run_id", "x", "y", "z"]
        if header[:5] != fixed:
            raise DatasetError(f"{path}:1: header must start with {','.join(fixed)}")
        dim = len(header) - 5
        expected = [f"d{i}" for i in range(dim)]
        if dim < 1 or header[5:] != expected:
            raise DatasetError(f"{path}:1: descriptor columns must be d0..d{{E-1}}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                gid, rid = int(row[0]), int(row[1])
                vals = np.array([float(v) for v in row[2:]])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise DatasetError(f"{path}:{lineno}: non-finite value")
            prev = runs.setdefault(rid, [])
            if prev and gid <= prev[-1].global_id:
                raise DatasetError(
                    f"{path}:{lineno}: global_id {gid} not increasing within run {rid}"
                )
            prev.append(Keynode(gid, rid, vals[:3], vals[3:]))
    return [Trajectory(rid, nodes) for rid, nodes in runs.items()]


def write_keynodes(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    trajectories = list(trajectories)
    dim = len(trajectories[0].keynodes[0].d)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["global_id", "run_id", "x", "y", "z"] + [f"d{i}" for i in range(dim)])
        for traj in trajectories:
            for k in traj.keynodes:
                w.writerow([k.global_id, k.run_id] + [repr(float(v)) for v in k.t] + [repr(float(v)) for v in k.d])


def read_positions(path: str | Path) -> dict[int, tuple[int, np.ndarray]]:
    """Load a ``global_id,run_id,x,y,z`` file (extra columns ignored)."""
    path = Path(path)
    out: dict[int, tuple[int, np.ndarray]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:5] != ["global_id", "run_id", "x", "y", "z"]:
            raise DatasetError(f"{path}:1: expected header global_id,run_id,x,y,z")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out[int(row[0])] = (int(row[1]), np.array([float(v) for v in row[2:5]]))
            except (ValueError, IndexError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return out


def write_positions(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["global_id", "run_id", "x", "y", "z"])
        for traj in trajectories:
            for k in traj.keynodes:
                w.writerow([k.global_id, k.run_id] + [repr(float(v)) for v in k.t])


def check_unique_ids(trajectories: Sequence[Trajectory]) -> None:
    seen: set[int] = set()
    for traj in trajectories:
        for k in traj.keynodes:
            if k.global_id in seen:
                raise DatasetError(f"global_id {k.global_id} appears more than once")
            seen.add(k.global_id)
