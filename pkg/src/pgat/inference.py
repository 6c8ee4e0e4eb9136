"""Average-scheme scoring over overlapping subgraphs, ranking and AR@N."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .agnn import PGAT, stack_subgraphs
from .objective import similarity_matrix
from .pose_graph import DatasetError, Subgraph

DEFAULT_RADIUS_M = 25.0

PairScorer = Callable[[Sequence[tuple[Subgraph, Subgraph]]], list[np.ndarray]]


class SimilarityAccumulator:
    """Running sums and counts of similarity keyed by (query id, database id)."""

    def __init__(self, query_ids: Iterable[int], db_ids: Iterable[int]):
        self.query_ids = np.array(sorted(set(int(i) for i in query_ids)), dtype=np.int64)
        self.db_ids = np.array(sorted(set(int(i) for i in db_ids)), dtype=np.int64)
        self._qpos = {int(g): k for k, g in enumerate(self.query_ids)}
        self._dpos = {int(g): k for k, g in enumerate(self.db_ids)}
        self.total = np.zeros((len(self.query_ids), len(self.db_ids)))
        self.count = np.zeros((len(self.query_ids), len(self.db_ids)), dtype=np.int64)

    def add(self, q_ids: np.ndarray, d_ids: np.ndarray, s: np.ndarray) -> None:
        rows = np.array([self._qpos[int(i)] for i in q_ids])
        cols = np.array([self._dpos[int(j)] for j in d_ids])
        block = np.ix_(rows, cols)
        self.total[block] += s
        self.count[block] += 1

    def merge(self, other: "SimilarityAccumulator") -> None:
        if not (np.array_equal(self.query_ids, other.query_ids) and np.array_equal(self.db_ids, other.db_ids)):
            raise ValueError("accumulators index different keynodes")
        self.total += other.total
        self.count += other.count

    def averaged(self) -> np.ndarray:
        """Mean score per entry; NaN where nothing was accumulated."""
        out = np.full(self.total.shape, np.nan)
        seen = self.count > 0
        out[seen] = self.total[seen] / self.count[seen]
        return out

    def scores_for(self, query_id: int) -> tuple[np.ndarray, np.ndarray]:
        row = self._qpos[int(query_id)]
        seen = self.count[row] > 0
        return self.db_ids[seen], self.total[row, seen] / self.count[row, seen]


def model_scorer(model: PGAT, batch_size: int = 256) -> PairScorer:
    """Score subgraph pairs with the network's cosine similarity."""

    def score(pairs):
        out = []
        model.eval()
        with torch.no_grad():
            for start in range(0, len(pairs), batch_size):
                chunk = pairs[start:start + batch_size]
                n = max(max(len(q), len(d)) for q, d in chunk)
                a = stack_subgraphs([(q.d, q.p) for q, _ in chunk], n, dtype=model.dtype)
                b = stack_subgraphs([(d.d, d.p) for _, d in chunk], n, dtype=model.dtype)
                fa, fb = model(a, b)
                s = similarity_matrix(fa, fb, a.mask, b.mask).to(torch.float64).numpy()
                out.extend(s[i, :len(q), :len(d)] for i, (q, d) in enumerate(chunk))
        return out

    return score


def raw_scorer(pairs):
    """Cosine similarity of the input descriptors, ignoring graph context."""
    out = []
    for q, d in pairs:
        qa = q.d / np.linalg.norm(q.d, axis=1, keepdims=True)
        da = d.d / np.linalg.norm(d.d, axis=1, keepdims=True)
        out.append(qa @ da.T)
    return out


def _check_runs(subgraphs: Iterable[Subgraph], owner: dict[int, int]) -> None:
    for sg in subgraphs:
        for gid in sg.ids:
            prev = owner.setdefault(int(gid), sg.run_id)
            if prev != sg.run_id:
                raise DatasetError(f"global_id {int(gid)} used by runs {prev} and {sg.run_id}")


def average_scheme(
    query_subgraphs: Sequence[Subgraph],
    db_subgraphs: Sequence[Subgraph],
    scorer: PGAT | PairScorer,
    chunk: int = 4096,
) -> SimilarityAccumulator:
    """Average every keynode-pair score over all subgraph pairs that cover it.

    Each (query subgraph, database subgraph) pair is scored once; entry
    ``s_ij`` is added under the stored global ids of its two keynodes and the
    sums are divided by the per-entry counts on read-out.
    """
    owner: dict[int, int] = {}
    _check_runs(query_subgraphs, owner)
    _check_runs(db_subgraphs, owner)
    if isinstance(scorer, PGAT):
        scorer = model_scorer(scorer)
    acc = SimilarityAccumulator(
        (i for sg in query_subgraphs for i in sg.ids),
        (i for sg in db_subgraphs for i in sg.ids),
    )
    pairs = [(q, d) for q in query_subgraphs for d in db_subgraphs]
    for start in range(0, len(pairs), chunk):
        part = pairs[start:start + chunk]
        for (q, d), s in zip(part, scorer(part)):
            acc.add(q.ids, d.ids, s)
    return acc


def top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> list[int]:
    """Highest scores first; equal scores in ascending id order."""
    if k < 1:
        raise ValueError("K must be at least 1")
    ids = np.asarray(ids)
    order = np.lexsort((ids, -np.asarray(scores)))
    return [int(i) for i in ids[order[:k]]]


def recall_at_n(
    candidates: Mapping[int, Sequence[int]],
    positions: Mapping[int, np.ndarray],
    db_ids: Iterable[int],
    n: int,
    radius_m: float = DEFAULT_RADIUS_M,
) -> float:
    """Share of answerable queries with a true match among their top ``n``.

    A query is answerable when some database keynode lies within
    ``radius_m`` of it; other queries are left out of the denominator.
    """
    db = np.array(sorted(set(int(i) for i in db_ids)))
    db_pos = np.stack([positions[int(i)] for i in db])
    hits = total = 0
    for qid, cands in candidates.items():
        q = positions[int(qid)]
        if not (np.linalg.norm(db_pos - q, axis=1) <= radius_m).any():
            continue
        total += 1
        if any(np.linalg.norm(positions[int(c)] - q) <= radius_m for c in list(cands)[:n]):
            hits += 1
    return hits / total if total else 0.0


def one_percent_n(num_db: int) -> int:
    return max(1, math.ceil(0.01 * num_db))


@dataclass
class RetrievalReport:
    ranked: dict[int, list[tuple[int, float]]]
    radius_m: float = DEFAULT_RADIUS_M
    ar1: float = 0.0
    ar1pct: float = 0.0
    n_1pct: int = 1
    curve: dict[int, float] = field(default_factory=dict)
    num_queries: int = 0
    num_db: int = 0

    def summary(self) -> dict:
        return {
            "radius_m": self.radius_m,
            "num_queries": self.num_queries,
            "num_database": self.num_db,
            "AR@1": self.ar1,
            "AR@1%": self.ar1pct,
            "N@1%": self.n_1pct,
            "AR@N": {str(k): v for k, v in self.curve.items()},
        }


def rank_all(acc: SimilarityAccumulator, k: int) -> dict[int, list[tuple[int, float]]]:
    out = {}
    for qid in acc.query_ids:
        ids, scores = acc.scores_for(int(qid))
        order = np.lexsort((ids, -scores))[:k]
        out[int(qid)] = [(int(ids[i]), float(scores[i])) for i in order]
    return out


def evaluate(
    ranked: Mapping[int, Sequence[tuple[int, float]] | Sequence[int]],
    positions: Mapping[int, np.ndarray],
    db_ids: Sequence[int],
    radius_m: float = DEFAULT_RADIUS_M,
    curve_ns: Sequence[int] = (1, 2, 3, 4, 5, 10, 15, 20, 25),
) -> RetrievalReport:
    cands = {q: [c if isinstance(c, (int, np.integer)) else c[0] for c in lst] for q, lst in ranked.items()}
    n1 = one_percent_n(len(set(db_ids)))
    report = RetrievalReport(
        ranked={q: list(v) for q, v in ranked.items()},
        radius_m=radius_m,
        n_1pct=n1,
        num_queries=len(ranked),
        num_db=len(set(db_ids)),
    )
    report.curve = {n: recall_at_n(cands, positions, db_ids, n, radius_m) for n in curve_ns}
    report.ar1 = report.curve.get(1, recall_at_n(cands, positions, db_ids, 1, radius_m))
    report.ar1pct = recall_at_n(cands, positions, db_ids, n1, radius_m)
    return report


# -- report files -----------------------------------------------------------

REPORT_HEADER = ["query_id", "rank", "candidate_id", "score", "distance_m", "hit"]


def write_report_csv(path: str | Path, ranked: Mapping[int, Sequence[tuple[int, float]]],
                     positions: Mapping[int, np.ndarray], radius_m: float = DEFAULT_RADIUS_M) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for qid in sorted(ranked):
            for rank, (cid, score) in enumerate(ranked[qid], start=1):
                dist = float(np.linalg.norm(positions[cid] - positions[qid]))
                w.writerow([qid, rank, cid, f"{score:.17g}", f"{dist:.6f}", int(dist <= radius_m)])


def read_report_csv(path: str | Path) -> dict[int, list[tuple[int, float]]]:
    path = Path(path)
    rows: dict[int, list[tuple[int, int, float]]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != REPORT_HEADER:
            raise DatasetError(f"{path}:1: expected header {','.join(REPORT_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                q, r, c, s = int(row[0]), int(row[1]), int(row[2]), float(row[3])
            except (ValueError, IndexError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            rows.setdefault(q, []).append((r, c, s))
    return {q: [(c, s) for _, c, s in sorted(v)] for q, v in rows.items()}


def write_summary(path: str | Path, report: RetrievalReport) -> None:
    Path(path).write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")


def write_curve_csv(path: str | Path, report: RetrievalReport) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["N", "recall"])
        for n, r in report.curve.items():
            w.writerow([n, f"{r:.6f}"])
