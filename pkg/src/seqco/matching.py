"""Bipartite matching between object queries and targets.

Cost matrices are laid out queries x targets, shape (N, M) with M <= N. An
:class:`Assignment` maps every target to a distinct query.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import pairwise_box_distance

LAMBDA_CLS_MATCH = 2.0
LAMBDA_BOX_MATCH = 5.0
PROB_EPS = 1e-8


class NoTargets(ValueError):
    """Raised when there is nothing to match against; every query is background."""


@dataclass(frozen=True)
class Assignment:
    """``queries[j]`` is the query index matched to target ``j``."""

    queries: tuple[int, ...]

    @property
    def pairs(self) -> list[tuple[int, int]]:
        """(target, query) pairs in target order."""
        return list(enumerate(self.queries))

    def __len__(self) -> int:
        return len(self.queries)

    def cost(self, cost: np.ndarray) -> float:
        """Total cost under a queries x targets matrix, summed in target order."""
        return float(sum(cost[q, t] for t, q in self.pairs))


def validate_cost(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    n, m = c.shape
    if m < 1:
        raise NoTargets("cost matrix has no target columns")
    if m > n:
        raise ValueError(f"more targets ({m}) than queries ({n})")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    return c


def _shortest_augmenting_path(c: np.ndarray):
    """Kuhn-Munkres with potentials for an (n, m) matrix, n <= m.

    Rows are assigned one at a time along Dijkstra-style shortest augmenting
    paths. Returns (row -> column, row potentials, column potentials).
    """
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)   # owner[j]: 1-based row holding column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            row_to_col[owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _solve_value(c: np.ndarray) -> tuple[np.ndarray, float]:
    if c.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    cols, _, _ = _shortest_augmenting_path(c)
    return cols, float(c[np.arange(len(cols)), cols].sum())


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment of every target (column) to a distinct query (row).

    Among cost-minimal assignments the one whose query list is
    lexicographically smallest is returned.
    """
    c = validate_cost(cost).T           # targets x queries
    m, n = c.shape
    cols, u, v = _shortest_augmenting_path(c)
    best = float(c[np.arange(m), cols].sum())
    tol = 1e-9 * max(1.0, float(np.abs(c).max())) * m
    # optimal duals stay valid for every optimal assignment, so only tight
    # entries can appear in one; candidates are then confirmed by re-solving
    tight = (c - u[:, None] - v[None, :]) <= tol
    chosen = [int(x) for x in cols]
    for j in range(m):
        taken = set(chosen[:j])
        for q in np.flatnonzero(tight[j]):
            q = int(q)
            if q >= chosen[j]:
                break
            if q in taken:
                continue
            rest_cols = [k for k in range(n) if k not in taken and k != q]
            sub, sub_cost = _solve_value(c[j + 1:][:, rest_cols])
            prefix = sum(c[t, chosen[t]] for t in range(j))
            if prefix + c[j, q] + sub_cost <= best + tol:
                chosen = chosen[:j] + [q] + [rest_cols[k] for k in sub]
                break
    return Assignment(tuple(chosen))


def one_by_one(n: int) -> Assignment:
    """Identity matching: sequence i pairs with sequence i."""
    if n < 1:
        raise ValueError("one_by_one needs n >= 1")
    return Assignment(tuple(range(n)))


def _fg_prob(logits) -> np.ndarray:
    x = np.asarray(getattr(logits, "data", logits), dtype=np.float64).reshape(-1)
    return np.clip(1.0 / (1.0 + np.exp(-x)), PROB_EPS, 1.0 - PROB_EPS)


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def build_rps_cost(pred, proposals) -> np.ndarray:
    """Queries x proposals cost; every proposal is a foreground target.

    ``pred`` is anything with ``class_logits`` (N,) and ``boxes`` (N, 4).
    """
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if len(props) == 0:
        raise NoTargets("no proposals")
    boxes = _values(pred.boxes).reshape(-1, 4)
    if len(props) > len(boxes):
        raise ValueError(f"{len(props)} proposals exceed {len(boxes)} queries")
    cls = -LAMBDA_CLS_MATCH * np.log(_fg_prob(pred.class_logits))
    return cls[:, None] + LAMBDA_BOX_MATCH * pairwise_box_distance(boxes, props)


def build_branch_cost(online, momentum) -> np.ndarray:
    """Online queries x momentum sequences cost; the momentum branch is the target side.

    A momentum sequence counts as foreground when its foreground probability
    is at least 0.5; only foreground targets contribute the box term.
    """
    p_on = _fg_prob(online.class_logits)
    p_mo = _fg_prob(momentum.class_logits)
    if len(p_on) != len(p_mo):
        raise ValueError(f"branch sizes differ: {len(p_on)} online vs {len(p_mo)} momentum")
    fg = p_mo >= 0.5
    cls = np.where(fg[None, :], -np.log(p_on)[:, None], -np.log(1.0 - p_on)[:, None])
    box = pairwise_box_distance(_values(online.boxes), _values(momentum.boxes))
    return LAMBDA_CLS_MATCH * cls + LAMBDA_BOX_MATCH * box * fg[None, :]
