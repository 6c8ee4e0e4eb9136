"""Self-checks run by ``pgat verify``: gradients, oracle equivalence, invariants.

Each check returns a :class:`CheckResult`; nothing here is used on the
training or retrieval path.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .agnn import PGAT, SubgraphTensor, pgat_forward, stack_subgraphs
from .inference import average_scheme
from .numerics import grad_check, masked_layer_norm, masked_softmax
from .objective import similarity_matrix
from .pose_graph import Keynode, Subgraph, Trajectory, build_subgraphs, normalize_positions
from .trainer import batch_loss, make_batch


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def random_subgraph(rng: np.random.Generator, n: int, dim: int, first_id: int = 0,
                    run_id: int = 0, index: int = 0, spacing: float = 20.0) -> Subgraph:
    t = np.cumsum(rng.normal(0, 1, (n, 3)) * [spacing, spacing, 0.5], axis=0)
    p, c, sigma = normalize_positions(t)
    return Subgraph(index, run_id, np.arange(first_id, first_id + n), t, rng.normal(size=(n, dim)), p, c, sigma)


def random_trajectory(rng: np.random.Generator, n: int, dim: int, run_id: int, first_id: int,
                      spacing: float = 20.0) -> Trajectory:
    step = rng.uniform(0.5, 1.5, size=n) * spacing
    ang = np.cumsum(rng.normal(0, 0.3, size=n))
    xy = np.cumsum(np.stack([step * np.cos(ang), step * np.sin(ang)], axis=1), axis=0)
    pos = np.column_stack([xy, np.zeros(n)])
    desc = rng.normal(size=(n, dim))
    return Trajectory(run_id, [Keynode(first_id + i, run_id, pos[i], desc[i]) for i in range(n)])


def brute_force_average(query_subgraphs, db_subgraphs, score_pair) -> dict[tuple[int, int], float]:
    """Per-(query id, db id) mean of every pair score, by direct enumeration."""
    sums: dict[tuple[int, int], float] = defaultdict(float)
    counts: dict[tuple[int, int], int] = defaultdict(int)
    for q in query_subgraphs:
        for d in db_subgraphs:
            s = score_pair(q, d)
            for i in range(len(q)):
                for j in range(len(d)):
                    key = (int(q.ids[i]), int(d.ids[j]))
                    sums[key] += float(s[i, j])
                    counts[key] += 1
    return {k: sums[k] / counts[k] for k in sums}


def table_scorer(rng: np.random.Generator):
    """Scorer returning a fixed random matrix per subgraph pair."""
    table: dict = {}

    def lookup(q, d):
        key = (q.run_id, q.index, d.run_id, d.index)
        if key not in table:
            table[key] = rng.uniform(-1, 1, size=(len(q), len(d)))
        return table[key]

    return lookup, (lambda pairs: [lookup(q, d) for q, d in pairs])


def max_diff_vs_oracle(acc, oracle: dict[tuple[int, int], float]) -> float:
    avg = acc.averaged()
    qi = {int(g): k for k, g in enumerate(acc.query_ids)}
    di = {int(g): k for k, g in enumerate(acc.db_ids)}
    worst = 0.0
    for (q, d), v in oracle.items():
        worst = max(worst, abs(avg[qi[q], di[d]] - v))
    if int((acc.count > 0).sum()) != len(oracle):
        return float("inf")
    return worst


def algorithm_one(query: Subgraph, db_subgraphs, score_pair, num_db: int) -> np.ndarray:
    """Literal index-arithmetic averaging (0-based ``d = j + l``)."""
    total = np.zeros((len(query), num_db))
    count = np.zeros((len(query), num_db))
    for l, sg in enumerate(db_subgraphs):
        s = score_pair(query, sg)
        for i in range(len(query)):
            for j in range(len(sg)):
                d = j + l
                total[i, d] += s[i, j]
                count[i, d] += 1
    out = np.full(total.shape, np.nan)
    seen = count > 0
    out[seen] = total[seen] / count[seen]
    return out


# -- checks -----------------------------------------------------------------

def check_gradients(seed: int = 0, tol: float = 1e-4) -> CheckResult:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = PGAT(8, 2, 2, seed=seed)
    a = random_subgraph(rng, 3, 8, 0)
    b = random_subgraph(rng, 4, 8, 100)
    b.t[:2] = a.t[:2] + 1.0  # two positives, rest negative or ignored
    batch = make_batch([(a, b)], 10.0, 50.0)
    report = grad_check(lambda: batch_loss(model, batch)[0], model.named_parameters(), 1e-5)
    name, err = report.worst()
    return CheckResult("gradient check (E=8, L=2, h=2)", err < tol,
                       f"max rel err {err:.2e} at {name} over {len(report.errors)} tensors")


def check_average_scheme(configs: int = 20, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < configs:
        dim = 4
        q_traj = random_trajectory(rng, int(rng.integers(3, 9)), dim, 0, 0)
        db = [random_trajectory(rng, int(rng.integers(3, 12)), dim, r, 1000 * r) for r in (1, 2)]
        thr = float(rng.uniform(25, 80))
        qs = build_subgraphs(q_traj, thr)
        ds = [sg for t in db for sg in build_subgraphs(t, thr)]
        if not qs or not ds:
            continue
        lookup, scorer = table_scorer(rng)
        acc = average_scheme(qs, ds, scorer)
        worst = max(worst, max_diff_vs_oracle(acc, brute_force_average(qs, ds, lookup)))
        done += 1
    return CheckResult("average scheme vs brute force", worst <= tol, f"max abs diff {worst:.1e} over {done} configs")


def check_algorithm_one(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    db = Trajectory(1, [Keynode(i, 1, np.array([20.0 * i, 0, 0]), rng.normal(size=4)) for i in range(15)])
    q = random_subgraph(rng, 4, 4, first_id=500, run_id=0)
    ds = build_subgraphs(db, 70.0)
    lookup, scorer = table_scorer(rng)
    acc = average_scheme([q], ds, scorer)
    ref = algorithm_one(q, ds, lookup, 15)
    ok = np.array_equal(acc.averaged(), ref, equal_nan=True)
    return CheckResult("stride-1 id keying == d=j+l indexing", ok, "entry-for-entry" if ok else "mismatch")


def check_padding_permutation(seed: int = 0, tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = PGAT(16, 2, 4, seed=seed)
    a = random_subgraph(rng, 5, 16)
    b = random_subgraph(rng, 7, 16, 100)
    with torch.no_grad():
        fa, fb = pgat_forward(stack_subgraphs([(a.d, a.p)]), stack_subgraphs([(b.d, b.p)]), model)
        pa, pb = pgat_forward(stack_subgraphs([(a.d, a.p)], 12), stack_subgraphs([(b.d, b.p)], 10), model)
        pad_err = max((pa[..., :5] - fa).abs().max().item(), (pb[..., :7] - fb).abs().max().item())
        perm = rng.permutation(5)
        qa, qb = pgat_forward(stack_subgraphs([(a.d[perm], a.p[perm])]), stack_subgraphs([(b.d, b.p)]), model)
        perm_err = max((qa - fa[..., perm]).abs().max().item(), (qb - fb).abs().max().item())
    ok = pad_err <= tol and perm_err <= tol
    return CheckResult("padding / permutation invariance", ok, f"padding {pad_err:.1e}, permutation {perm_err:.1e}")


def check_masked_norm(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.normal(size=(2, 6, 9)))
    mask = torch.zeros(2, 9, dtype=torch.bool)
    mask[0, :4] = True
    mask[1, :7] = True
    base = masked_layer_norm(x, mask)
    garbage = x.clone()
    garbage[~mask.unsqueeze(1).expand_as(x)] = float("nan")
    garbage[0, :, 5] = float("inf")
    other = masked_layer_norm(garbage, mask)
    ok = torch.equal(base, other)
    return CheckResult("masked norm ignores padded columns", ok, "bit-exact" if ok else "differs")


def check_softmax(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    s = torch.as_tensor(rng.normal(size=(5, 8)) * 50)
    mask = torch.as_tensor(rng.random(8) < 0.6)
    mask[0] = True
    w = masked_softmax(s, mask)
    err = (w.sum(-1) - 1).abs().max().item()
    ok = err < 1e-9 and bool((w[:, ~mask] == 0).all()) and bool(((w >= 0) & (w <= 1)).all())
    return CheckResult("masked softmax normalization", ok, f"row-sum err {err:.1e}")


def check_cosine_scale(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    fa = torch.as_tensor(rng.normal(size=(8, 3)))
    fb = torch.as_tensor(rng.normal(size=(8, 4)))
    s1 = similarity_matrix(fa, fb)
    s2 = similarity_matrix(fa * torch.tensor([2.0, 0.5, 7.0]), fb)
    err = (s1 - s2).abs().max().item()
    return CheckResult("cosine scale invariance", err < 1e-9, f"max diff {err:.1e}")


SUITES: dict[str, list[Callable[[], CheckResult]]] = {
    "gradients": [check_gradients],
    "oracles": [check_average_scheme, check_algorithm_one],
    "invariants": [check_padding_permutation, check_masked_norm, check_softmax, check_cosine_scale],
}


def run_all(echo: Callable[[str], None] = print) -> bool:
    ok = True
    for suite, checks in SUITES.items():
        echo(f"== {suite}")
        for check in checks:
            res = check()
            echo(res.line())
            ok &= res.passed
    return ok
