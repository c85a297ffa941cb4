"""Multiscale dyadic distance ``D_p`` and the coupling it controls.

Cells of the level-``l`` partition of ``(-1, 1]^d`` are the half-open cubes
``(a, a + 2^(1-l)]``; a coordinate ``x`` sits in cell ``ceil((x + 1) 2^(l-1)) - 1``.
Occupied cells are keyed by Morton (bit-interleaved) codes so that the code of
a parent cell is the child code shifted right by ``d`` bits, and one sort at
the finest level orders every coarser level too.  Work is ``O(atoms * depth)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .measures import DiscreteMeasure, MeasureError, ReferenceMeasure

_MASS_TOL = 1e-12


class DyadicError(ValueError):
    pass


def kappa(p: float, d: int) -> float:
    """Constant with ``T_p <= kappa(p, d) * D_p``."""
    if p <= 0 or d < 1:
        raise DyadicError("need p > 0 and d >= 1")
    return 2.0 ** (p * (1 + d / 2)) * (2.0**p + 1) / (2.0**p - 1)


def default_depth(d: int) -> int:
    return min(24, math.ceil(48 / d))


def max_depth(d: int) -> int:
    return min(62, 63 // d)


class DpValue(NamedTuple):
    value: float
    truncation_bound: float

    @property
    def upper(self) -> float:
        return self.value + self.truncation_bound


# ---------------------------------------------------------------------------
# cell codes


def cell_indices(points: np.ndarray, level: int) -> np.ndarray:
    """Per-coordinate cell index at ``level`` for points in ``(-1, 1]^d``."""
    y = (np.asarray(points, dtype=float) + 1.0) * 2.0 ** (level - 1)
    idx = np.ceil(y).astype(np.int64) - 1
    return np.clip(idx, 0, 2**level - 1)


def morton_codes(idx: np.ndarray, level: int) -> np.ndarray:
    """Interleave the ``level`` low bits of each coordinate index."""
    n, d = idx.shape
    if d * level > 63:
        raise DyadicError(f"depth {level} too large for d={d}")
    u = idx.astype(np.uint64)
    code = np.zeros(n, dtype=np.uint64)
    for b in range(level):
        for k in range(d):
            code |= ((u[:, k] >> np.uint64(b)) & np.uint64(1)) << np.uint64(b * d + k)
    return code


def _check_unit_cube(points: np.ndarray, what: str):
    if points.size and (np.any(points <= -1.0) or np.any(points > 1.0)):
        raise DyadicError(f"{what} is not supported in (-1, 1]^d; rescale it first")


def _reference_in_unit_cube(ref: ReferenceMeasure) -> bool:
    if ref.kind == "uniform_cube":
        return ref.params["radius"] <= 1.0
    if ref.kind == "split_support":
        return ref.params["offset"] + ref.params["half_width"] <= 1.0
    if ref.kind == "product_of_1d":
        return all(m.support()[0] >= -1.0 and m.support()[1] <= 1.0 for m in ref.params["marginals"])
    return False


# ---------------------------------------------------------------------------
# shells


def shell_index(points: np.ndarray) -> np.ndarray:
    """Smallest ``n >= 0`` with ``x`` in ``(-2^n, 2^n]^d``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        return np.zeros(0, dtype=np.int64)
    # log2 guess, then exact membership tests fix edge cases such as x_k = -2^k
    span = np.maximum(pts.max(axis=1), -pts.min(axis=1))
    with np.errstate(divide="ignore"):
        n = np.ceil(np.log2(np.maximum(span, 1e-300))).astype(np.int64)
    n = np.maximum(n - 1, 0)

    def inside(k):
        s = np.ldexp(1.0, k)[:, None]
        return np.all((pts > -s) & (pts <= s), axis=1)

    for _ in range(3):
        bump = ~inside(n)
        if not bump.any():
            break
        n = n + bump
    return n


def _shell_box(n: int, d: int):
    s = 2.0**n
    return np.full((1, d), -s), np.full((1, d), s)


def _reference_shell_mass(ref: ReferenceMeasure, n: int) -> float:
    lo, hi = _shell_box(n, ref.dim)
    outer = ref.box_mass(lo, hi)[0]
    if n == 0:
        return float(outer)
    ilo, ihi = _shell_box(n - 1, ref.dim)
    return float(max(outer - ref.box_mass(ilo, ihi)[0], 0.0))


def _reference_cell_mass(ref: ReferenceMeasure, n: int, idx: np.ndarray, level: int) -> np.ndarray:
    """``ref(2^n F cap B_n)`` for the level-``level`` cells with indices ``idx``."""
    side = 2.0 ** (1 - level)
    lo = (-1.0 + idx * side) * 2.0**n
    hi = lo + side * 2.0**n
    mass = ref.box_mass(lo, hi)
    if n >= 1:
        h = 2.0 ** (n - 1)
        ilo = np.maximum(lo, -h)
        ihi = np.minimum(hi, h)
        nonempty = np.all(ihi > ilo, axis=1)
        if nonempty.any():
            inner = np.zeros(len(lo))
            inner[nonempty] = ref.box_mass(ilo[nonempty], ihi[nonempty])
            mass = mass - inner
    return np.maximum(mass, 0.0)


def _moment_tail_bound(ref: ReferenceMeasure, p: float, n_last: int) -> float:
    """Bound on ``sum_{n > n_last} 2^(pn) ref(B_n)`` from a finite moment of order ``r > p``.

    Points of ``B_n`` have ``|x| > 2^(n-1)``, so ``ref(B_n) <= M_r 2^(-r(n-1))``.
    """
    q_max = ref.moment_order_finite
    candidates = [r for r in (p + 0.5, p + 1, 2 * p, 2 * p + 2, 4 * p + 4) if r > p and r < q_max]
    if math.isfinite(q_max) and q_max > p:
        candidates.append((p + q_max) / 2)
    best = math.inf
    for r in candidates:
        try:
            m_r = ref.moment(r)
        except MeasureError:
            continue
        ratio = 2.0 ** (p - r)
        best = min(best, m_r * 2.0**r * ratio ** (n_last + 1) / (1 - ratio))
    return best


# ---------------------------------------------------------------------------
# accounts


@dataclass
class LevelTally:
    """Masses of the occupied cells of one level.

    ``cells`` holds per-coordinate indices (one row per cell).  ``rest_mu`` /
    ``rest_nu`` carry mass lying in cells that are not listed (only nonzero
    for a diffuse reference, whose unoccupied cells are never enumerated).
    """

    level: int
    codes: np.ndarray
    cells: np.ndarray
    mass_mu: np.ndarray
    mass_nu: np.ndarray
    rest_mu: float = 0.0
    rest_nu: float = 0.0

    def discrepancy(self, scale_mu: float = 1.0, scale_nu: float = 1.0) -> float:
        """``sum_F |scale_mu mu(F) - scale_nu nu(F)|`` over all cells of the level."""
        listed = np.abs(scale_mu * self.mass_mu - scale_nu * self.mass_nu).sum()
        return float(listed + scale_mu * self.rest_mu + scale_nu * self.rest_nu)


@dataclass
class ShellAccount:
    n: int
    mass_mu: float
    mass_nu: float
    levels: list[LevelTally] = field(default_factory=list)
    # level at which every cell holds a single location (discrete pairs only)
    separated_at: int | None = None
    # sum over locations of |mu(x) - nu(x)|: the limit of the raw level discrepancy,
    # and the same with both restrictions normalised to mass 1
    limit_discrepancy: float | None = None
    limit_normalised: float | None = None


@dataclass
class DyadicAccount:
    """Per-shell, per-level cell tallies of two measures."""

    dim: int
    depth: int
    shells: dict[int, ShellAccount]
    # beyond the listed shells: exact sum_{n} 2^(pn) nu(B_n) is evaluated lazily
    reference: ReferenceMeasure | None = None

    def check(self, tol: float = _MASS_TOL) -> None:
        """Assert level totals and parent/child consistency; raises ``AssertionError``."""
        d = self.dim
        for sh in self.shells.values():
            prev = None
            for tally in sh.levels:
                assert np.all(tally.cells >= 0) and np.all(tally.cells < 2**tally.level)
                assert abs(tally.mass_mu.sum() + tally.rest_mu - sh.mass_mu) <= tol
                assert abs(tally.mass_nu.sum() + tally.rest_nu - sh.mass_nu) <= tol
                if prev is not None:
                    parent = tally.codes >> np.uint64(d)
                    pos = np.searchsorted(prev.codes, parent)
                    assert np.all(prev.codes[pos] == parent)
                    summed_mu = np.bincount(pos, weights=tally.mass_mu, minlength=len(prev.codes))
                    summed_nu = np.bincount(pos, weights=tally.mass_nu, minlength=len(prev.codes))
                    assert np.allclose(summed_mu, prev.mass_mu, rtol=0, atol=tol)
                    if tally.rest_nu == 0 and prev.rest_nu == 0:
                        assert np.allclose(summed_nu, prev.mass_nu, rtol=0, atol=tol)
                    else:
                        assert np.all(summed_nu <= prev.mass_nu + tol)
                prev = tally


def _tally_levels(points, w_mu, w_nu, depth, *, ref=None, shell=0, stop_when_separated=False):
    """Walk levels 1..depth over atoms already mapped into ``(-1, 1]^d``."""
    d = points.shape[1]
    idx_fine = cell_indices(points, depth)
    codes_fine = morton_codes(idx_fine, depth)
    order = np.argsort(codes_fine, kind="stable")
    codes_fine = codes_fine[order]
    idx_fine = idx_fine[order]
    w_mu = w_mu[order]
    w_nu = w_nu[order]

    n_locations = None
    if ref is None:
        n_locations = len(np.unique(points, axis=0)) if len(points) else 0

    levels = []
    separated_at = None
    for level in range(1, depth + 1):
        codes = codes_fine >> np.uint64(d * (depth - level))
        if len(codes):
            starts = np.flatnonzero(np.r_[True, codes[1:] != codes[:-1]])
        else:
            starts = np.zeros(0, dtype=np.int64)
        cell_codes = codes[starts]
        cells = idx_fine[starts] >> (depth - level)
        mass_mu = np.add.reduceat(w_mu, starts) if len(starts) else np.zeros(0)
        if ref is None:
            mass_nu = np.add.reduceat(w_nu, starts) if len(starts) else np.zeros(0)
            tally = LevelTally(level, cell_codes, cells, mass_mu, mass_nu)
        else:
            mass_nu = _reference_cell_mass(ref, shell, cells, level)
            tally = LevelTally(level, cell_codes, cells, mass_mu, mass_nu)
        levels.append(tally)
        if ref is None and len(starts) == n_locations:
            separated_at = level
            if stop_when_separated:
                break
    return levels, separated_at


def build_account(mu: DiscreteMeasure, nu, depth: int | None = None, *, compact: bool = False,
                  n_max: int | None = None) -> DyadicAccount:
    """Tally ``mu`` and ``nu`` over the dyadic partitions of every shell.

    With ``compact=True`` both measures must live in ``(-1, 1]^d`` and only
    shell 0 (the cube itself) is used.
    """
    d = mu.dim
    if nu.dim != d:
        raise DyadicError("dimension mismatch")
    depth = default_depth(d) if depth is None else int(depth)
    if depth < 1:
        raise DyadicError("depth must be >= 1")
    if depth > max_depth(d):
        raise DyadicError(f"depth {depth} exceeds the maximum {max_depth(d)} for d={d}")

    ref = None
    if isinstance(nu, ReferenceMeasure):
        if nu.is_discrete:
            nu = nu.as_discrete()
        elif nu.has_box_masses:
            ref = nu
        else:
            nu = nu.proxy()

    if compact:
        _check_unit_cube(mu.points, "mu")
        if ref is None:
            _check_unit_cube(nu.points, "nu")
        elif not _reference_in_unit_cube(ref):
            raise DyadicError("reference measure is not supported in (-1, 1]^d")

    mu_shell = np.zeros(len(mu), dtype=np.int64) if compact else shell_index(mu.points)
    if ref is None:
        nu_shell = np.zeros(len(nu), dtype=np.int64) if compact else shell_index(nu.points)
        top = int(max(mu_shell.max(), nu_shell.max()))
    else:
        top = int(mu_shell.max())
    if n_max is not None:
        top = min(top, int(n_max))

    shells = {}
    for n in range(top + 1):
        scale = 2.0**-n
        sel_mu = mu_shell == n
        m_mu = float(mu.weights[sel_mu].sum())
        if ref is None:
            sel_nu = nu_shell == n
            m_nu = float(nu.weights[sel_nu].sum())
            pts = np.concatenate([mu.points[sel_mu], nu.points[sel_nu]]) * scale
            w_mu = np.concatenate([mu.weights[sel_mu], np.zeros(sel_nu.sum())])
            w_nu = np.concatenate([np.zeros(sel_mu.sum()), nu.weights[sel_nu]])
        else:
            m_nu = 1.0 if compact else _reference_shell_mass(ref, n)
            pts = mu.points[sel_mu] * scale
            w_mu = mu.weights[sel_mu]
            w_nu = np.zeros(len(pts))
        if m_mu == 0 and m_nu == 0:
            continue
        account = ShellAccount(n, m_mu, m_nu)
        if len(pts):
            levels, sep = _tally_levels(pts, w_mu, w_nu, depth, ref=ref, shell=n,
                                        stop_when_separated=ref is None)
            if ref is not None:
                for t in levels:
                    t.rest_nu = max(m_nu - float(t.mass_nu.sum()), 0.0)
                    t.mass_nu = np.minimum(t.mass_nu, m_nu)
            account.levels = levels
            account.separated_at = sep
            if ref is None:
                # limit of the level discrepancy: atoms at the same location cancel
                _, inv = np.unique(pts, axis=0, return_inverse=True)
                inv = inv.reshape(-1)
                loc_mu = np.bincount(inv, weights=w_mu)
                loc_nu = np.bincount(inv, weights=w_nu)
                account.limit_discrepancy = float(np.abs(loc_mu - loc_nu).sum())
                if m_mu > 0 and m_nu > 0:
                    account.limit_normalised = float(np.abs(loc_mu / m_mu - loc_nu / m_nu).sum())
        shells[n] = account
    return DyadicAccount(d, depth, shells, reference=ref)


# ---------------------------------------------------------------------------
# D_p


def _shell_inner_dp(sh: ShellAccount, p: float, depth: int) -> DpValue:
    """``D_p`` between the normalised restrictions of one shell (compact formula)."""
    if sh.mass_mu <= 0 or sh.mass_nu <= 0:
        return DpValue(0.0, 0.0)
    c = (2.0**p - 1) / 2
    a, b = 1.0 / sh.mass_mu, 1.0 / sh.mass_nu
    total = 0.0
    last = 0.0
    for t in sh.levels:
        last = t.discrepancy(a, b)
        total += 2.0 ** (-p * t.level) * last
    total *= c
    used = sh.levels[-1].level if sh.levels else 0
    if sh.separated_at is not None:
        # every deeper level repeats the separated discrepancy: geometric tail
        return DpValue(total + last * 2.0 ** (-p * used) / 2, 0.0)
    # level discrepancies increase to their limit (at most 2), so the omitted
    # levels add at most limit * 2^(-p L) / 2
    lim = 2.0 if sh.limit_normalised is None else min(2.0, sh.limit_normalised)
    return DpValue(total, lim * 2.0 ** (-p * used) / 2)


def dp_compact(mu: DiscreteMeasure, nu, p: float, depth: int | None = None) -> DpValue:
    """``D_p`` on ``(-1, 1]^d`` summed over levels ``1..depth``.

    Returns the partial sum and a bound on the omitted levels.  For two
    discrete measures the walk stops as soon as every cell holds one location;
    the remaining levels then repeat the same discrepancy, the geometric tail
    is added in closed form and the bound is 0.
    """
    if p <= 0:
        raise DyadicError("p must be positive")
    account = build_account(mu, nu, depth, compact=True)
    sh = account.shells.get(0)
    if sh is None:
        return DpValue(0.0, 0.0)
    return _shell_inner_dp(sh, p, account.depth)


def dp_noncompact(mu: DiscreteMeasure, nu, p: float, depth: int | None = None,
                  n_max: int | None = None) -> DpValue:
    """``D_p`` on ``R^d`` through the shells ``B_n``.

    Each shell contributes ``2^(pn) (|mu(B_n) - nu(B_n)| + min * D_p(R mu, R nu))``
    with the inner distance from :func:`dp_compact`'s formula on the rescaled
    restrictions.  Shells beyond the atoms of ``mu`` that only carry reference
    mass contribute exactly ``2^(pn) nu(B_n)``; those are summed until a
    moment bound certifies the rest, which is reported as the truncation.
    """
    if p <= 0:
        raise DyadicError("p must be positive")
    account = build_account(mu, nu, depth, n_max=n_max)
    return _dp_from_account(account, mu, nu, p, n_max)


def _dp_from_account(account: DyadicAccount, mu, nu, p, n_max) -> DpValue:
    value = 0.0
    trunc = 0.0
    top = -1
    for n, sh in sorted(account.shells.items()):
        top = max(top, n)
        inner = _shell_inner_dp(sh, p, account.depth)
        m = min(sh.mass_mu, sh.mass_nu)
        value += 2.0 ** (p * n) * (abs(sh.mass_mu - sh.mass_nu) + m * inner.value)
        trunc += 2.0 ** (p * n) * m * inner.truncation_bound
    ref = account.reference
    if n_max is not None:
        top = int(n_max)
        trunc += _excess_beyond(mu, nu, p, top, ref)
    elif ref is not None:
        extra, bound = _reference_shell_tail(ref, p, top)
        value += extra
        trunc += bound
    return DpValue(value, trunc)


def _reference_shell_tail(ref: ReferenceMeasure, p: float, top: int, rel: float = 1e-15):
    """Exact ``sum_{n > top} 2^(pn) ref(B_n)`` up to a certified remainder."""
    total = 0.0
    n = top
    while True:
        n += 1
        total += 2.0 ** (p * n) * _reference_shell_mass(ref, n)
        bound = _moment_tail_bound(ref, p, n)
        if bound <= rel * max(total, 1e-300) or n - top >= 200 or n >= 1000:
            return total, bound


def _excess_beyond(mu: DiscreteMeasure, nu, p: float, top: int, ref) -> float:
    """``sum_{n > top} 2^(pn) (mu(B_n) + nu(B_n))`` for a user-imposed ``n_max``."""
    sh = shell_index(mu.points)
    out = float(np.sum(mu.weights[sh > top] * 2.0 ** (p * sh[sh > top])))
    if ref is None:
        nu_d = nu.as_discrete() if isinstance(nu, ReferenceMeasure) and nu.is_discrete else nu
        if isinstance(nu_d, ReferenceMeasure):
            nu_d = nu_d.proxy()
        shn = shell_index(nu_d.points)
        out += float(np.sum(nu_d.weights[shn > top] * 2.0 ** (p * shn[shn > top])))
    else:
        extra, bound = _reference_shell_tail(ref, p, top)
        out += extra + bound
    return out


def flattened_bound(mu: DiscreteMeasure, nu, p: float, depth: int | None = None,
                    n_max: int | None = None, *, partial: bool = False) -> float:
    """Flattened multiscale sum ``sum_n 2^(pn) sum_{l>=0} 2^(-pl) sum_F |mu(2^n F cap B_n) - nu(2^n F cap B_n)|``.

    No normalisation by shell masses and no multiplicative constant.  With
    ``partial=True`` only levels up to ``depth`` are summed; otherwise a
    separated discrete shell gets its exact geometric tail.
    """
    if p <= 0:
        raise DyadicError("p must be positive")
    account = build_account(mu, nu, depth, n_max=n_max)
    total = 0.0
    top = -1
    for n, sh in sorted(account.shells.items()):
        top = max(top, n)
        s = abs(sh.mass_mu - sh.mass_nu)
        last = 0.0
        for t in sh.levels:
            last = t.discrepancy()
            s += 2.0 ** (-p * t.level) * last
        if sh.separated_at is not None and sh.levels:
            used = sh.levels[-1].level
            if partial:
                # separated levels repeat up to the requested depth
                s += last * sum(2.0 ** (-p * l) for l in range(used + 1, account.depth + 1))
            else:
                s += last * 2.0 ** (-p * (used + 1)) / (1 - 2.0**-p)
        total += 2.0 ** (p * n) * s
    if not partial and account.reference is not None and n_max is None:
        # shells without atoms: sum_l 2^(-pl) * ref(B_n) * 1 (every level carries ref(B_n))
        extra, _ = _reference_shell_tail(account.reference, p, top)
        total += extra / (1 - 2.0**-p)
    return total


ridic_bound = flattened_bound  # interface name


def flattened_bound_constant(p: float) -> float:
    """A constant ``C`` with ``dp_noncompact <= C * flattened_bound``.

    Comes from ``min(a, b) |x/a - y/b| <= |x - y| + y |1 - a/b|`` summed over
    cells; ``1`` suffices when ``p <= 1``.
    """
    return 1.0 if p <= 1 else max(1.5, (2.0**p - 1) / 2)


# ---------------------------------------------------------------------------
# couplings


@dataclass
class TransportPlan:
    """Sparse coupling between two discrete measures.

    ``src[k]``, ``tgt[k]`` index the atoms of the source and target measures
    and ``mass[k]`` is the transported mass.
    """

    src: np.ndarray
    tgt: np.ndarray
    mass: np.ndarray
    p: float
    cost_p: float

    @classmethod
    def from_entries(cls, src, tgt, mass, mu: DiscreteMeasure, nu: DiscreteMeasure, p: float):
        src = np.asarray(src, dtype=np.int64)
        tgt = np.asarray(tgt, dtype=np.int64)
        mass = np.asarray(mass, dtype=float)
        keep = mass > 0
        src, tgt, mass = src[keep], tgt[keep], mass[keep]
        if len(src):
            key = src * len(nu) + tgt
            uniq, inv = np.unique(key, return_inverse=True)
            mass = np.bincount(inv.reshape(-1), weights=mass)
            src, tgt = uniq // len(nu), uniq % len(nu)
        return cls(src, tgt, mass, p, plan_cost(src, tgt, mass, mu, nu, p))

    @property
    def entries(self):
        return list(zip(self.src.tolist(), self.tgt.tolist(), self.mass.tolist()))

    def marginals(self, n_src: int, n_tgt: int):
        return (np.bincount(self.src, weights=self.mass, minlength=n_src),
                np.bincount(self.tgt, weights=self.mass, minlength=n_tgt))

    def is_coupling_of(self, mu: DiscreteMeasure, nu: DiscreteMeasure, tol: float = 1e-9) -> bool:
        if np.any(self.mass < 0):
            return False
        row, col = self.marginals(len(mu), len(nu))
        return bool(np.allclose(row, mu.weights, rtol=0, atol=tol) and np.allclose(col, nu.weights, rtol=0, atol=tol))

    def to_csv(self, path=None) -> str:
        lines = ["src_index,tgt_index,mass"]
        lines += [f"{i},{j},{m!r}" for i, j, m in self.entries]
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        return text


def plan_cost(src, tgt, mass, mu: DiscreteMeasure, nu: DiscreteMeasure, p: float) -> float:
    if len(src) == 0:
        return 0.0
    dist = np.linalg.norm(mu.points[src] - nu.points[tgt], axis=1)
    return float(np.dot(mass, dist**p))


def _tree_match(pts_a, w_a, pts_b, w_b, depth):
    """Greedy bottom-up matching of two equal-mass atom sets in ``(-1, 1]^d``.

    Mass is first matched inside the finest cells, leftovers move to the
    parent cell and are matched there, and so on up to the whole cube.
    Within a cell, atoms are paired in index order.
    """
    d = pts_a.shape[1]
    codes_a = morton_codes(cell_indices(pts_a, depth), depth)
    codes_b = morton_codes(cell_indices(pts_b, depth), depth)
    cells: dict[int, tuple[list, list]] = {}
    for i, c in enumerate(codes_a.tolist()):
        cells.setdefault(c, ([], []))[0].append([i, float(w_a[i])])
    for j, c in enumerate(codes_b.tolist()):
        cells.setdefault(c, ([], []))[1].append([j, float(w_b[j])])

    out = []
    for level in range(depth, -1, -1):
        nxt: dict[int, tuple[list, list]] = {}
        for code in sorted(cells):
            left, right = cells[code]
            left.sort(key=lambda e: e[0])
            right.sort(key=lambda e: e[0])
            ia = ib = 0
            while ia < len(left) and ib < len(right):
                m = min(left[ia][1], right[ib][1])
                out.append((left[ia][0], right[ib][0], m))
                left[ia][1] -= m
                right[ib][1] -= m
                if left[ia][1] <= _MASS_TOL * 1e-3:
                    ia += 1
                if right[ib][1] <= _MASS_TOL * 1e-3:
                    ib += 1
            rest_a = [e for e in left[ia:] if e[1] > 0]
            rest_b = [e for e in right[ib:] if e[1] > 0]
            if level == 0:
                # rounding crumbs: attach to the last pair so marginals stay exact
                for e in rest_a:
                    out.append((e[0], out[-1][1] if out else 0, e[1]))
                for e in rest_b:
                    out.append((out[-1][0] if out else 0, e[0], e[1]))
                continue
            if rest_a or rest_b:
                bucket = nxt.setdefault(code >> d, ([], []))
                bucket[0].extend(rest_a)
                bucket[1].extend(rest_b)
        cells = nxt
    return out


def build_coupling(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float, depth: int | None = None) -> TransportPlan:
    """Explicit coupling whose cost is at most ``kappa(p, d) * D_p(mu, nu)``.

    Shell by shell, the common mass ``min(mu(B_n), nu(B_n))`` is coupled by
    tree matching of the rescaled restrictions; the shell excesses are
    coupled by the independent product of the two excess measures.
    """
    if isinstance(nu, ReferenceMeasure):
        nu = nu.as_discrete()
    if mu.dim != nu.dim:
        raise DyadicError("dimension mismatch")
    d = mu.dim
    depth = default_depth(d) if depth is None else int(depth)
    sh_mu = shell_index(mu.points)
    sh_nu = shell_index(nu.points)
    top = int(max(sh_mu.max(), sh_nu.max()))
    src, tgt, mass = [], [], []
    alpha = np.zeros(len(mu))
    beta = np.zeros(len(nu))
    for n in range(top + 1):
        ia = np.flatnonzero(sh_mu == n)
        ib = np.flatnonzero(sh_nu == n)
        a_tot = float(mu.weights[ia].sum())
        b_tot = float(nu.weights[ib].sum())
        m = min(a_tot, b_tot)
        if m > 0:
            scale = 2.0**-n
            pairs = _tree_match(mu.points[ia] * scale, mu.weights[ia] / a_tot,
                                nu.points[ib] * scale, nu.weights[ib] / b_tot, depth)
            for i, j, w in pairs:
                src.append(ia[i])
                tgt.append(ib[j])
                mass.append(m * w)
        if a_tot > b_tot:
            alpha[ia] = (a_tot - b_tot) * mu.weights[ia] / a_tot
        elif b_tot > a_tot:
            beta[ib] = (b_tot - a_tot) * nu.weights[ib] / b_tot
    q = alpha.sum()
    if q > 0:
        ia = np.flatnonzero(alpha)
        ib = np.flatnonzero(beta)
        # column scale uses beta's own total so the target marginal is exact
        prod = np.outer(alpha[ia] / q, beta[ib])
        ii, jj = np.meshgrid(ia, ib, indexing="ij")
        src.extend(ii.ravel().tolist())
        tgt.extend(jj.ravel().tolist())
        mass.extend(prod.ravel().tolist())
    return TransportPlan.from_entries(src, tgt, mass, mu, nu, p)
