"""Tag-trajectory / tracklet matching.

Builds a time-averaged Mahalanobis cost matrix and solves the constrained
linear assignment exactly: maximize sum(1/c_ij * x_ij) subject to each
tracklet used at most once, no temporally overlapping tracklets on one tag,
and x_ij = 0 wherever the cost exceeds the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import SingularCovariance
from .tracking import TagTrajectory

COST_FLOOR = 1e-6  # clamp before inverting 1/c
DEFAULT_ALIGN_TOLERANCE = 0.25  # seconds


@dataclass
class Tracklet:
    tracklet_id: str
    timestamps: np.ndarray  # (N,)
    positions: np.ndarray  # (N, 3) world-frame ground points

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        if self.timestamps.size == 0:
            raise ValueError("tracklet must contain at least one point")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("tracklet timestamps must be strictly increasing")


@dataclass
class CostMatrix:
    costs: np.ndarray  # (n_tags, n_tracklets), non-negative or inf
    support: np.ndarray  # shared-timestamp counts


@dataclass
class AssignmentResult:
    x: np.ndarray  # binary (n_tags, n_tracklets)
    objective: float


def mahalanobis(delta: np.ndarray, cov: np.ndarray) -> float:
    """sqrt(delta^T cov^-1 delta) with a jitter retry on singular cov."""
    for jitter in (0.0, 1e-9, 1e-6):
        try:
            sol = np.linalg.solve(cov + jitter * np.eye(3), delta)
            d2 = float(delta @ sol)
            if not math.isfinite(d2):
                continue
            return float(math.sqrt(max(0.0, d2)))
        except np.linalg.LinAlgError:
            continue
    raise SingularCovariance("position covariance not invertible after jitter")


def pairwise_cost(
    tag: TagTrajectory,
    tracklet: Tracklet,
    align_tolerance: float = DEFAULT_ALIGN_TOLERANCE,
) -> Tuple[float, int]:
    """Mean Mahalanobis distance over tracklet timestamps the tag can serve.

    Timestamps where the tag is uncertain (largest marginal eigenvalue above
    its threshold) or has no sample within align_tolerance contribute nothing.
    Returns (inf, 0) when no timestamp survives.
    """
    total = 0.0
    count = 0
    for t, p in zip(tracklet.timestamps, tracklet.positions):
        q = tag.query(float(t), align_tolerance)
        if q is None or q.uncertain:
            continue
        total += mahalanobis(p - q.position, q.position_cov)
        count += 1
    if count == 0:
        return math.inf, 0
    return total / count, count


def temporal_overlap(a: Tracklet, b: Tracklet, decimals: int = 6) -> bool:
    """True iff the tracklets share at least one frame timestamp."""
    sa = np.round(a.timestamps, decimals)
    sb = np.round(b.timestamps, decimals)
    return bool(np.intersect1d(sa, sb).size > 0)


def build_cost_matrix(
    tags: Sequence[TagTrajectory],
    tracklets: Sequence[Tracklet],
    align_tolerance: float = DEFAULT_ALIGN_TOLERANCE,
) -> CostMatrix:
    costs = np.full((len(tags), len(tracklets)), math.inf)
    support = np.zeros((len(tags), len(tracklets)), dtype=int)
    for i, tag in enumerate(tags):
        for j, trk in enumerate(tracklets):
            costs[i, j], support[i, j] = pairwise_cost(tag, trk, align_tolerance)
    return CostMatrix(costs=costs, support=support)


def overlap_matrix(tracklets: Sequence[Tracklet]) -> np.ndarray:
    m = len(tracklets)
    out = np.zeros((m, m), dtype=bool)
    for a in range(m):
        for b in range(a + 1, m):
            out[a, b] = out[b, a] = temporal_overlap(tracklets[a], tracklets[b])
    return out


def solve_assignment(
    costs: CostMatrix | np.ndarray,
    overlaps: np.ndarray,
    c_th: float,
) -> AssignmentResult:
    """Exact depth-first branch-and-bound over candidate (tag, tracklet) pairs.

    Candidates are sorted by descending weight 1/c; the bound adds the full
    remaining weight. Ties resolve to the first-found (lexicographically
    smallest in that order) solution, which makes the output deterministic.
    """
    c = costs.costs if isinstance(costs, CostMatrix) else np.asarray(costs, dtype=float)
    n_tags, n_trk = c.shape
    overlaps = np.asarray(overlaps, dtype=bool)

    candidates = []
    for i in range(n_tags):
        for j in range(n_trk):
            cij = c[i, j]
            if math.isfinite(cij) and cij <= c_th:
                candidates.append((1.0 / max(cij, COST_FLOOR), i, j))
    # stable ordering: descending weight, then (tag, tracklet) index
    candidates.sort(key=lambda w: (-w[0], w[1], w[2]))

    weights = [w for w, _, _ in candidates]
    # optimistic remaining-sum bound, counting each column at most once
    suffix = np.zeros(len(candidates) + 1)
    best_w_by_col: dict[int, float] = {}
    total = 0.0
    for k in range(len(candidates) - 1, -1, -1):
        w, _, j = candidates[k]
        old = best_w_by_col.get(j, 0.0)
        if w > old:
            total += w - old
            best_w_by_col[j] = w
        suffix[k] = total

    best_obj = 0.0
    best_sel: List[int] = []
    sel: List[int] = []
    used_cols = set()
    rows_cols: dict[int, List[int]] = {}

    def feasible(k: int) -> bool:
        _, i, j = candidates[k]
        if j in used_cols:
            return False
        for jj in rows_cols.get(i, ()):
            if overlaps[j, jj]:
                return False
        return True

    def dfs(k: int, obj: float):
        nonlocal best_obj, best_sel
        if obj > best_obj + 1e-12:
            best_obj = obj
            best_sel = sel.copy()
        if k == len(candidates):
            return
        if obj + suffix[k] <= best_obj + 1e-12:
            return
        # include candidate k first (greedy order => first-found ties win)
        if feasible(k):
            _, i, j = candidates[k]
            sel.append(k)
            used_cols.add(j)
            rows_cols.setdefault(i, []).append(j)
            dfs(k + 1, obj + weights[k])
            rows_cols[i].pop()
            used_cols.discard(j)
            sel.pop()
        dfs(k + 1, obj)

    dfs(0, 0.0)

    x = np.zeros((n_tags, n_trk), dtype=int)
    for k in best_sel:
        _, i, j = candidates[k]
        x[i, j] = 1
    return AssignmentResult(x=x, objective=best_obj)


def check_feasible(result: AssignmentResult, costs, overlaps, c_th: float) -> bool:
    """Machine check of the assignment constraints on a solution."""
    c = costs.costs if isinstance(costs, CostMatrix) else np.asarray(costs, dtype=float)
    x = result.x
    if np.any(x.sum(axis=0) > 1):
        return False
    if np.any(x[(c > c_th) | ~np.isfinite(c)] != 0):
        return False
    for i in range(x.shape[0]):
        js = np.flatnonzero(x[i])
        for a in range(len(js)):
            for b in range(a + 1, len(js)):
                if overlaps[js[a], js[b]]:
                    return False
    return True
