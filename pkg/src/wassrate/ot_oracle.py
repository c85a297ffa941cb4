"""Exact transport costs between discrete measures (and 1-D reference laws).

Three independent routes to the same number:

* :func:`w1d_exact` -- monotone (quantile) coupling, valid in 1-D for ``p >= 1``;
* :func:`wexact_discrete` -- the full transport LP, solved by network simplex;
* :func:`wexact_assignment` -- Hungarian algorithm for two uniform ``N``-point measures.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass

import numpy as np

from .dyadic import TransportPlan
from .measures import DiscreteMeasure, MeasureError, ReferenceMeasure

# POT probes every array backend on import; we only need numpy
for _key in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_key}", "1")
import ot  # noqa: E402

DEFAULT_ENTRY_CAP = 10**6


class OracleError(ValueError):
    pass


class OracleCapExceeded(OracleError):
    pass


@dataclass(frozen=True)
class CostSpec:
    """Cost ``|x - y|^p``; ``mode="metric"`` reports ``W_p`` instead of ``T_p``."""

    p: float = 1.0
    mode: str = "raw"

    def __post_init__(self):
        if not self.p > 0:
            raise OracleError("p must be positive")
        if self.mode not in ("raw", "metric"):
            raise OracleError("mode must be 'raw' or 'metric'")

    def finish(self, tp: float) -> float:
        if self.mode == "metric" and self.p > 1:
            return tp ** (1.0 / self.p)
        return tp


def _cost(cost) -> CostSpec:
    return cost if isinstance(cost, CostSpec) else CostSpec(float(cost))


# ---------------------------------------------------------------------------
# one dimension


def w1d_exact(mu: DiscreteMeasure, nu: DiscreteMeasure, cost=1.0) -> float:
    """Quantile-coupling transport cost between two 1-D discrete measures."""
    cost = _cost(cost)
    if mu.dim != 1 or nu.dim != 1:
        raise OracleError("w1d_exact needs one-dimensional measures")
    if cost.p < 1:
        raise OracleError("the monotone coupling is only optimal for p >= 1; use wexact_discrete")
    xs, ws = _sorted_1d(mu)
    ys, vs = _sorted_1d(nu)
    cx = np.cumsum(ws)
    cy = np.cumsum(vs)
    cx[-1] = cy[-1] = 1.0
    breaks = np.union1d(cx, cy)
    du = np.diff(np.concatenate([[0.0], breaks]))
    # every quantile in (u_{k-1}, u_k] hits the same pair of atoms
    ix = np.minimum(np.searchsorted(cx, breaks, side="left"), len(xs) - 1)
    iy = np.minimum(np.searchsorted(cy, breaks, side="left"), len(ys) - 1)
    tp = float(np.dot(du, np.abs(xs[ix] - ys[iy]) ** cost.p))
    return cost.finish(tp)


def _sorted_1d(m: DiscreteMeasure):
    x = m.points[:, 0]
    order = np.argsort(x, kind="stable")
    return x[order], m.weights[order]


def w1d_reference(mu: DiscreteMeasure, ref: ReferenceMeasure, cost=1.0) -> float:
    """Exact ``T_p`` between a 1-D discrete measure and a 1-D reference law.

    Atom ``k`` (sorted) receives the quantile band ``(c_{k-1}, c_k]`` of the
    reference.  For ``p`` in {1, 2} the band integrals are closed form through
    partial moments of the quantile function; other ``p`` use quadrature.
    """
    cost = _cost(cost)
    if mu.dim != 1 or ref.dim != 1:
        raise OracleError("w1d_reference needs one-dimensional measures")
    if cost.p < 1:
        raise OracleError("the monotone coupling is only optimal for p >= 1")
    if ref.is_discrete:
        return w1d_exact(mu, ref.as_discrete(), cost)
    x, w = _sorted_1d(mu)
    c = np.cumsum(w)
    c[-1] = 1.0
    a = np.concatenate([[0.0], c[:-1]])
    b = c
    p = cost.p
    if p == 1:
        split = np.clip(ref.cdf(x), a, b)
        below = x * (split - a) - ref.quantile_integral(a, split, 1)
        above = ref.quantile_integral(split, b, 1) - x * (b - split)
        tp = float(np.sum(below + above))
    elif p == 2:
        tp = float(np.sum(x * x * (b - a) - 2 * x * ref.quantile_integral(a, b, 1) + ref.quantile_integral(a, b, 2)))
    else:
        from scipy import integrate

        tp = 0.0
        for xk, lo, hi in zip(x, a, b):
            if hi > lo:
                tp += integrate.quad(lambda u: abs(xk - float(ref.quantile(u))) ** p, lo, hi, limit=200)[0]
    return cost.finish(max(tp, 0.0))


# ---------------------------------------------------------------------------
# general discrete LP


def cost_matrix(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float) -> np.ndarray:
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)) ** p


def wexact_discrete(mu: DiscreteMeasure, nu: DiscreteMeasure, cost=1.0, *,
                    max_entries: int = DEFAULT_ENTRY_CAP) -> tuple[float, TransportPlan]:
    """Optimal transport value and an optimal vertex plan (network simplex)."""
    cost = _cost(cost)
    if mu.dim != nu.dim:
        raise OracleError("dimension mismatch")
    if len(mu) * len(nu) > max_entries:
        raise OracleCapExceeded(f"{len(mu)} x {len(nu)} cost matrix exceeds the cap of {max_entries} entries")
    M = cost_matrix(mu, nu, cost.p)
    a = np.ascontiguousarray(mu.weights, dtype=np.float64)
    b = np.ascontiguousarray(nu.weights, dtype=np.float64)
    # renormalise so both marginals have bit-identical totals
    b = b * (a.sum() / b.sum())
    G, log = ot.emd(a, b, M, numItermax=max(100_000, 50 * len(a) * len(b)), log=True)
    if log.get("result_code", 1) != 1:
        raise OracleError(f"network simplex did not converge: {log.get('warning')}")
    src, tgt = np.nonzero(G > 0)
    plan = TransportPlan.from_entries(src, tgt, G[src, tgt], mu, nu, cost.p)
    return cost.finish(plan.cost_p), plan


# ---------------------------------------------------------------------------
# assignment


def hungarian(C: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching of a square cost matrix.

    Shortest augmenting path formulation with row/column potentials,
    ``O(n^3)``.  Returns ``col_of_row``.
    """
    C = np.asarray(C, dtype=float)
    n = C.shape[0]
    if C.shape != (n, n):
        raise OracleError("cost matrix must be square")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=np.int64)  # 1-based; 0 means free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[row_of_col[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[row_of_col[1:] - 1] = np.arange(n)
    return col_of_row


def wexact_assignment(mu: DiscreteMeasure, nu: DiscreteMeasure, cost=1.0) -> float:
    """``T_p`` between two uniform ``N``-atom measures as a min-cost matching / ``N``."""
    cost = _cost(cost)
    if len(mu) != len(nu):
        raise OracleError("assignment needs equal atom counts")
    if not (mu.is_uniform and nu.is_uniform):
        raise OracleError("assignment needs uniform weights")
    M = cost_matrix(mu, nu, cost.p)
    perm = hungarian(M)
    return cost.finish(float(M[np.arange(len(mu)), perm].sum() / len(mu)))


def brute_force_assignment(mu: DiscreteMeasure, nu: DiscreteMeasure, cost=1.0) -> float:
    """Minimum over all ``N!`` permutations; for cross-checks with small ``N``."""
    cost = _cost(cost)
    if len(mu) != len(nu) or len(mu) > 9:
        raise OracleError("brute force needs equal sizes and N <= 9")
    M = cost_matrix(mu, nu, cost.p)
    rows = np.arange(len(mu))
    best = min(M[rows, list(perm)].sum() for perm in itertools.permutations(range(len(mu))))
    return cost.finish(float(best / len(mu)))


def transport_to_reference(mu: DiscreteMeasure, ref, cost=1.0, *, proxy: DiscreteMeasure | None = None,
                           max_entries: int = DEFAULT_ENTRY_CAP) -> float:
    """``T_p(mu, ref)``: exact in 1-D for ``p >= 1``, else LP against a discrete proxy."""
    cost = _cost(cost)
    if isinstance(ref, DiscreteMeasure):
        ref = ReferenceMeasure.from_discrete(ref)
    if mu.dim == 1 and cost.p >= 1:
        if ref.is_discrete:
            return w1d_exact(mu, ref.as_discrete(), cost)
        try:
            return w1d_reference(mu, ref, cost)
        except MeasureError:
            pass
    target = ref.as_discrete() if ref.is_discrete else (proxy if proxy is not None else ref.proxy())
    return wexact_discrete(mu, target, cost, max_entries=max_entries)[0]


__all__ = [
    "CostSpec",
    "OracleError",
    "OracleCapExceeded",
    "w1d_exact",
    "w1d_reference",
    "wexact_discrete",
    "wexact_assignment",
    "hungarian",
    "brute_force_assignment",
    "cost_matrix",
    "transport_to_reference",
]
