"""Discrete and reference probability measures on R^d.

Every empirical measure in the package is a :class:`DiscreteMeasure`; the
laws we sample from are :class:`ReferenceMeasure` instances, which also know
their box masses (when a product factorisation exists), their moments and,
in dimension one, their quantile function.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import integrate, special

WEIGHT_TOL = 1e-12
DEFAULT_PROXY_SIZE = 100_000


class MeasureError(ValueError):
    """Raised for malformed measures or unsupported measure operations."""


def _as_points(points, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dim in (None, 1) else arr.reshape(1, -1)
    if arr.ndim != 2:
        raise MeasureError(f"points must be a 2-D array, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise MeasureError(f"expected {dim} coordinates per point, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise MeasureError("points must be finite")
    return arr


def _merge_atoms(points: np.ndarray, weights: np.ndarray):
    """Merge repeated locations, keeping first-occurrence order."""
    _, first, inverse = np.unique(points, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    if len(first) == len(points):
        return points, weights
    summed = np.bincount(inverse, weights=weights, minlength=len(first))
    order = np.argsort(first, kind="stable")
    return points[first[order]], summed[order]


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finitely supported probability measure ``sum_i w_i delta_{x_i}``.

    Zero-weight atoms are dropped and repeated locations merged at
    construction, so two measures built from the same multiset of weighted
    points are identical atom for atom.
    """

    points: np.ndarray
    weights: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        pts = _as_points(self.points)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(w) != len(pts):
            raise MeasureError(f"{len(pts)} points but {len(w)} weights")
        if len(w) == 0:
            raise MeasureError("a probability measure needs at least one atom")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise MeasureError("weights must be finite and nonnegative")
        total = w.sum()
        if abs(total - 1.0) > 1e-9:
            raise MeasureError(f"weights sum to {total!r}, not 1")
        keep = w > 0
        pts, w = _merge_atoms(pts[keep], w[keep])
        w = w / w.sum()
        pts = np.ascontiguousarray(pts)
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "dim", pts.shape[1])

    def __len__(self) -> int:
        return len(self.weights)

    def __repr__(self) -> str:
        return f"DiscreteMeasure(n_atoms={len(self)}, dim={self.dim})"

    @classmethod
    def dirac(cls, x) -> "DiscreteMeasure":
        pts = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1)
        return cls(pts, np.ones(1))

    @property
    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / len(self), rtol=0, atol=1e-12))

    def scaled(self, s: float) -> "DiscreteMeasure":
        """Image measure under ``x -> s x``."""
        return DiscreteMeasure(self.points * s, self.weights)

    def translated(self, v) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points + np.asarray(v, dtype=float), self.weights)


def empirical(samples) -> DiscreteMeasure:
    """Uniform-weight measure on the given samples (duplicates merged)."""
    if isinstance(samples, np.ndarray):
        if samples.size == 0:
            raise MeasureError("empty sample list")
        pts = _as_points(samples)
    else:
        samples = list(samples)
        if not samples:
            raise MeasureError("empty sample list")
        rows = [np.atleast_1d(np.asarray(s, dtype=float)) for s in samples]
        if len({r.shape for r in rows}) != 1:
            raise MeasureError("samples have inconsistent dimensions")
        pts = _as_points(np.stack(rows))
    n = len(pts)
    return DiscreteMeasure(pts, np.full(n, 1.0 / n))


def poissonized_sample_size(n_target: int, rng: np.random.Generator) -> int:
    """Draw the random sample size of a Poisson point process with mean ``n_target``."""
    if n_target < 1:
        raise MeasureError("n_target must be >= 1")
    return int(rng.poisson(n_target))


# ---------------------------------------------------------------------------
# reference laws


def _std_normal_pdf(z):
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.exp(-0.5 * np.square(z)) / math.sqrt(2 * math.pi)
    return np.where(np.isfinite(z), out, 0.0)


def _z_pdf(z):
    # z * phi(z), with the limits at +-inf set to 0
    with np.errstate(invalid="ignore"):
        out = z * _std_normal_pdf(z)
    return np.where(np.isfinite(z), out, 0.0)


class ReferenceMeasure:
    """A reference law ``mu``.

    Build instances through the classmethod constructors
    (:meth:`uniform_cube`, :meth:`gaussian`, :meth:`pareto_radial`, ...).
    ``box_mass`` is exact for product-type kinds; other kinds fall back to a
    seeded discrete proxy of ``proxy_size`` atoms.
    """

    KINDS = (
        "two_point",
        "split_support",
        "uniform_cube",
        "pareto_radial",
        "gaussian",
        "product_of_1d",
        "discrete_proxy",
    )

    def __init__(self, kind: str, dim: int, params: dict | None = None, *, proxy_size=DEFAULT_PROXY_SIZE, proxy_seed=0):
        if kind not in self.KINDS:
            raise MeasureError(f"unknown reference kind {kind!r}")
        if int(dim) < 1:
            raise MeasureError("dim must be a positive integer")
        self.kind = kind
        self.dim = int(dim)
        self.params = dict(params or {})
        self.proxy_size = int(proxy_size)
        self.proxy_seed = proxy_seed
        self._proxy: DiscreteMeasure | None = None

    def __repr__(self):
        return f"ReferenceMeasure({self.kind!r}, dim={self.dim}, params={self.params})"

    # -- constructors -------------------------------------------------------

    @classmethod
    def two_point(cls, a, b, w: float = 0.5) -> "ReferenceMeasure":
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if a.shape != b.shape:
            raise MeasureError("two_point atoms must have the same dimension")
        if not 0 < w < 1:
            raise MeasureError("two_point weight must lie in (0, 1)")
        return cls("two_point", len(a), {"a": a, "b": b, "w": float(w)})

    @classmethod
    def split_support(cls, dim: int = 1, half_width: float = 0.25, offset: float = 0.75, w: float = 0.5):
        """Even mixture of two uniform cubes centred at ``+-offset e_1``.

        The cubes are disjoint when ``half_width < offset``.
        """
        if not 0 < half_width < offset:
            raise MeasureError("split_support needs 0 < half_width < offset")
        return cls("split_support", dim, {"half_width": float(half_width), "offset": float(offset), "w": float(w)})

    @classmethod
    def uniform_cube(cls, dim: int = 1, radius: float = 1.0) -> "ReferenceMeasure":
        if radius <= 0:
            raise MeasureError("radius must be positive")
        return cls("uniform_cube", dim, {"radius": float(radius)})

    @classmethod
    def pareto_radial(cls, dim: int = 1, q: float = 3.0) -> "ReferenceMeasure":
        """Density proportional to ``|x|^(-q-d)`` on ``{|x| >= 1}``."""
        if q <= 0:
            raise MeasureError("pareto_radial requires q > 0")
        return cls("pareto_radial", dim, {"q": float(q)})

    @classmethod
    def gaussian(cls, dim: int = 1, mean=None, var=None) -> "ReferenceMeasure":
        mean = np.zeros(dim) if mean is None else np.broadcast_to(np.asarray(mean, float), (dim,)).copy()
        var = np.ones(dim) if var is None else np.broadcast_to(np.asarray(var, float), (dim,)).copy()
        if np.any(var <= 0):
            raise MeasureError("gaussian variances must be positive")
        return cls("gaussian", dim, {"mean": mean, "var": var})

    @classmethod
    def product_of_1d(cls, marginals: Sequence) -> "ReferenceMeasure":
        """Product of frozen ``scipy.stats`` continuous marginals."""
        marginals = list(marginals)
        if not marginals:
            raise MeasureError("need at least one marginal")
        return cls("product_of_1d", len(marginals), {"marginals": marginals})

    @classmethod
    def from_discrete(cls, measure: DiscreteMeasure) -> "ReferenceMeasure":
        ref = cls("discrete_proxy", measure.dim, {"measure": measure})
        ref._proxy = measure
        return ref

    # -- basic properties ---------------------------------------------------

    @property
    def moment_order_finite(self) -> float:
        if self.kind == "pareto_radial":
            return self.params["q"]
        if self.kind == "product_of_1d":
            return self.params.get("moment_order", math.inf)
        return math.inf

    @property
    def is_discrete(self) -> bool:
        return self.kind in ("two_point", "discrete_proxy")

    @property
    def has_box_masses(self) -> bool:
        if self.kind == "pareto_radial":
            return self.dim == 1
        return self.kind in ("two_point", "split_support", "uniform_cube", "gaussian", "product_of_1d")

    def as_discrete(self) -> DiscreteMeasure:
        """Exact discrete form for atomic kinds."""
        if self.kind == "two_point":
            p = self.params
            return DiscreteMeasure(np.stack([p["a"], p["b"]]), np.array([p["w"], 1 - p["w"]]))
        if self.kind == "discrete_proxy":
            return self.params["measure"]
        raise MeasureError(f"{self.kind} is not atomic")

    def proxy(self, size: int | None = None, rng: np.random.Generator | None = None) -> DiscreteMeasure:
        """Discrete stand-in: the exact measure for atomic kinds, else an i.i.d. sample."""
        if self.is_discrete:
            return self.as_discrete()
        if size is None and rng is None:
            if self._proxy is None:
                self._proxy = empirical(self.sample(self.proxy_size, np.random.default_rng(self.proxy_seed)))
            return self._proxy
        rng = np.random.default_rng(self.proxy_seed) if rng is None else rng
        return empirical(self.sample(size or self.proxy_size, rng))

    # -- sampling -----------------------------------------------------------

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` i.i.d. draws as an ``(n, dim)`` array."""
        n = int(n)
        if n < 1:
            raise MeasureError("n must be >= 1")
        d = self.dim
        p = self.params
        if self.kind == "uniform_cube":
            # r(1 - 2U) with U in [0, 1) lands in (-r, r]
            return p["radius"] * (1.0 - 2.0 * rng.random((n, d)))
        if self.kind == "gaussian":
            return p["mean"] + np.sqrt(p["var"]) * rng.standard_normal((n, d))
        if self.kind == "two_point":
            at_a = rng.random(n) < p["w"]
            return np.where(at_a[:, None], p["a"], p["b"])
        if self.kind == "pareto_radial":
            radius = (1.0 - rng.random(n)) ** (-1.0 / p["q"])
            if d == 1:
                direction = np.where(rng.random(n) < 0.5, -1.0, 1.0)[:, None]
            else:
                g = rng.standard_normal((n, d))
                direction = g / np.linalg.norm(g, axis=1, keepdims=True)
            return radius[:, None] * direction
        if self.kind == "split_support":
            h, c = p["half_width"], p["offset"]
            left = rng.random(n) < p["w"]
            out = h * (1.0 - 2.0 * rng.random((n, d)))
            out[:, 0] += np.where(left, -c, c)
            return out
        if self.kind == "product_of_1d":
            u = rng.random((n, d))
            return np.column_stack([m.ppf(u[:, k]) for k, m in enumerate(p["marginals"])])
        if self.kind == "discrete_proxy":
            m = p["measure"]
            idx = rng.choice(len(m), size=n, p=m.weights)
            return m.points[idx].copy()
        raise AssertionError(self.kind)

    # -- one-dimensional distribution functions -----------------------------

    def _axis_cdf(self, axis: int, t):
        """CDF of coordinate ``axis`` at ``t`` (product kinds only)."""
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.kind == "uniform_cube":
            r = p["radius"]
            return np.clip((t + r) / (2 * r), 0.0, 1.0)
        if self.kind == "gaussian":
            return special.ndtr((t - p["mean"][axis]) / math.sqrt(p["var"][axis]))
        if self.kind == "pareto_radial":
            q = p["q"]
            with np.errstate(divide="ignore"):
                lo = 0.5 * np.abs(np.minimum(t, -1.0)) ** (-q)
                hi = 1.0 - 0.5 * np.maximum(t, 1.0) ** (-q)
            return np.where(t <= -1.0, lo, np.where(t >= 1.0, hi, 0.5))
        if self.kind == "product_of_1d":
            return p["marginals"][axis].cdf(t)
        raise MeasureError(f"no coordinate CDF for {self.kind}")

    def _product_box_mass(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        mass = np.ones(lo.shape[0])
        for k in range(self.dim):
            mass = mass * np.clip(self._axis_cdf(k, hi[:, k]) - self._axis_cdf(k, lo[:, k]), 0.0, 1.0)
        return mass

    def box_mass(self, lo, hi) -> np.ndarray:
        """Mass of the half-open boxes ``(lo, hi]``; ``lo``, ``hi`` have shape ``(k, dim)``."""
        lo = np.atleast_2d(np.asarray(lo, dtype=float))
        hi = np.atleast_2d(np.asarray(hi, dtype=float))
        if self.kind in ("uniform_cube", "gaussian", "product_of_1d") or (
            self.kind == "pareto_radial" and self.dim == 1
        ):
            return self._product_box_mass(lo, hi)
        if self.kind == "split_support":
            p = self.params
            comps = []
            for shift in (-p["offset"], p["offset"]):
                cube = ReferenceMeasure.uniform_cube(self.dim, p["half_width"])
                s = np.zeros(self.dim)
                s[0] = shift
                comps.append(cube._product_box_mass(lo - s, hi - s))
            return p["w"] * comps[0] + (1 - p["w"]) * comps[1]
        m = self.as_discrete() if self.is_discrete else self.proxy()
        inside = np.all((m.points[None, :, :] > lo[:, None, :]) & (m.points[None, :, :] <= hi[:, None, :]), axis=2)
        return inside @ m.weights

    # quantile-side helpers used by the 1-D exact transport against this law

    def cdf(self, t):
        self._require_1d()
        return self._axis_cdf(0, t)

    def quantile(self, u):
        self._require_1d()
        u = np.asarray(u, dtype=float)
        p = self.params
        if self.kind == "uniform_cube":
            return p["radius"] * (2 * u - 1)
        if self.kind == "gaussian":
            return p["mean"][0] + math.sqrt(p["var"][0]) * special.ndtri(u)
        if self.kind == "pareto_radial":
            q = p["q"]
            with np.errstate(divide="ignore"):
                neg = -((2 * np.minimum(u, 0.5)) ** (-1 / q))
                pos = (2 * (1 - np.maximum(u, 0.5))) ** (-1 / q)
            return np.where(u < 0.5, neg, pos)
        if self.kind == "product_of_1d":
            return p["marginals"][0].ppf(u)
        raise MeasureError(f"no quantile function for {self.kind}")

    def quantile_integral(self, a, b, power: int):
        """``int_a^b Q(u)^power du`` for ``power`` in {1, 2}, vectorised over ``a <= b``."""
        self._require_1d()
        if power not in (1, 2):
            raise MeasureError("power must be 1 or 2")
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        p = self.params
        if self.kind == "uniform_cube":
            r = p["radius"]
            if power == 1:
                return r * ((b * b - b) - (a * a - a))
            return r * r * ((2 * b - 1) ** 3 - (2 * a - 1) ** 3) / 6.0
        if self.kind == "gaussian":
            m, s = p["mean"][0], math.sqrt(p["var"][0])
            za, zb = special.ndtri(a), special.ndtri(b)
            first = _std_normal_pdf(za) - _std_normal_pdf(zb)
            if power == 1:
                return m * (b - a) + s * first
            second = (b - a) - _z_pdf(zb) + _z_pdf(za)
            return m * m * (b - a) + 2 * m * s * first + s * s * second
        if self.kind == "pareto_radial":
            q = p["q"]
            if q <= power:
                return np.full(np.broadcast(a, b).shape, math.inf)
            e = 1.0 - power / q

            def upper(u):  # antiderivative of (2(1-u))^(-power/q) on [1/2, 1]
                return -0.5 * (2 * (1 - u)) ** e / e

            def lower(u):  # antiderivative of (-(2u)^(-1/q))^power on [0, 1/2]
                return (-1.0) ** power * 0.5 * (2 * u) ** e / e

            a_lo, b_lo = np.minimum(a, 0.5), np.minimum(b, 0.5)
            a_hi, b_hi = np.maximum(a, 0.5), np.maximum(b, 0.5)
            return (lower(b_lo) - lower(a_lo)) + (upper(b_hi) - upper(a_hi))
        if self.kind == "product_of_1d":
            dist = p["marginals"][0]
            out = np.empty(np.broadcast(a, b).shape)
            for i, (lo, hi) in enumerate(np.broadcast(a, b)):
                out.flat[i] = integrate.quad(lambda u: dist.ppf(u) ** power, lo, hi, limit=200)[0] if hi > lo else 0.0
            return out
        raise MeasureError(f"no quantile integral for {self.kind}")

    def _require_1d(self):
        if self.dim != 1:
            raise MeasureError("only defined in dimension 1")

    # -- moments --------------------------------------------------------------

    def moment(self, q: float) -> float:
        """``M_q = E|X|^q`` with the Euclidean norm."""
        if q <= 0:
            raise MeasureError("q must be positive")
        if q >= self.moment_order_finite:
            raise MeasureError(f"M_q is infinite for {self.kind} when q >= {self.moment_order_finite}")
        d, p = self.dim, self.params
        if self.kind == "pareto_radial":
            return p["q"] / (p["q"] - q)
        if self.kind == "two_point":
            return float(p["w"] * np.linalg.norm(p["a"]) ** q + (1 - p["w"]) * np.linalg.norm(p["b"]) ** q)
        if self.kind == "discrete_proxy":
            return moment(p["measure"], q)
        if self.kind == "uniform_cube":
            r = p["radius"]
            if d == 1:
                return r**q / (q + 1)
            if q == 2:
                return d * r * r / 3
            return _gauss_legendre_moment(d, r, q)
        if self.kind == "gaussian":
            mean, var = p["mean"], p["var"]
            if np.all(mean == 0) and np.all(var == var[0]):
                s = math.sqrt(var[0])
                return float(s**q * 2 ** (q / 2) * math.exp(special.gammaln((d + q) / 2) - special.gammaln(d / 2)))
            return _gauss_hermite_moment(mean, var, q)
        if self.kind == "product_of_1d" and d == 1:
            return float(p["marginals"][0].expect(lambda x: abs(x) ** q))
        return moment(self.proxy(), q)


def _gauss_legendre_moment(d: int, r: float, q: float) -> float:
    n = max(8, int(round(2 ** (18 / d))))
    # split [-r, r] at 0 so the kink of |x|^q sits on a panel edge
    x, w = np.polynomial.legendre.leggauss(n)
    nodes = np.concatenate([(x - 1) * r / 2, (x + 1) * r / 2])
    weights = np.concatenate([w, w]) * r / 2 / (2 * r)
    grids = np.meshgrid(*([nodes] * d), indexing="ij")
    wgrid = np.ones_like(grids[0])
    for g in np.meshgrid(*([weights] * d), indexing="ij"):
        wgrid = wgrid * g
    norm = np.sqrt(sum(g * g for g in grids))
    return float(np.sum(wgrid * norm**q))


def _gauss_hermite_moment(mean, var, q: float) -> float:
    d = len(mean)
    if d == 1:
        s = math.sqrt(var[0])
        f = lambda x: abs(x) ** q * math.exp(-0.5 * ((x - mean[0]) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        lo, hi = mean[0] - 40 * s, mean[0] + 40 * s
        pts = [0.0] if lo < 0 < hi else None
        return float(integrate.quad(f, lo, hi, points=pts, limit=200, epsabs=0, epsrel=1e-12)[0])
    n = max(8, min(200, int(round(2 ** (16 / d)))))
    x, w = np.polynomial.hermite_e.hermegauss(n)
    w = w / w.sum()
    axes = [mean[k] + math.sqrt(var[k]) * x for k in range(d)]
    grids = np.meshgrid(*axes, indexing="ij")
    wgrid = np.ones_like(grids[0])
    for g in np.meshgrid(*([w] * d), indexing="ij"):
        wgrid = wgrid * g
    norm = np.sqrt(sum(g * g for g in grids))
    return float(np.sum(wgrid * norm**q))


def moment(m, q: float) -> float:
    """``M_q(m) = int |x|^q m(dx)``."""
    if isinstance(m, ReferenceMeasure):
        return m.moment(q)
    if q <= 0:
        raise MeasureError("q must be positive")
    norms = np.linalg.norm(m.points, axis=1)
    return float(np.dot(m.weights, norms**q))


def exp_moment(m: DiscreteMeasure, alpha: float, gamma: float) -> float:
    """``E_{alpha,gamma}(m) = int exp(gamma |x|^alpha) m(dx)``; overflow gives ``inf``."""
    if alpha <= 0 or gamma <= 0:
        raise MeasureError("alpha and gamma must be positive")
    norms = np.linalg.norm(m.points, axis=1)
    with np.errstate(over="ignore"):
        vals = np.exp(gamma * norms**alpha)
    return float(np.dot(m.weights, vals))


# ---------------------------------------------------------------------------
# point-cloud CSV files


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def read_point_cloud(path) -> DiscreteMeasure:
    """Load a CSV point cloud: one point per row, optional trailing ``weight`` column.

    A header row is detected by a non-numeric first token.  Without a header
    every column is a coordinate and weights are uniform.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise MeasureError(f"{path}: no data rows")
    header = None
    if not _is_number(rows[0][0].strip()):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        if not rows:
            raise MeasureError(f"{path}: no data rows")
    width = len(rows[0])
    try:
        data = np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise MeasureError(f"{path}: non-numeric entry ({exc})") from None
    if any(len(r) != width for r in rows):
        raise MeasureError(f"{path}: rows have inconsistent column counts")
    has_weight = header is not None and header[-1].lower() == "weight"
    if has_weight:
        if width < 2:
            raise MeasureError(f"{path}: weight column without coordinates")
        pts, w = data[:, :-1], data[:, -1]
        if np.any(w < 0) or w.sum() <= 0:
            raise MeasureError(f"{path}: weights must be nonnegative with positive sum")
        w = w / w.sum()
    else:
        pts, w = data, np.full(len(data), 1.0 / len(data))
    try:
        return DiscreteMeasure(pts, w)
    except MeasureError as exc:
        raise MeasureError(f"{path}: {exc}") from None


def write_point_cloud(measure: DiscreteMeasure, path=None, *, weights: bool = True) -> str:
    """Serialise a measure in the point-cloud CSV format; returns the text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = [f"x{k}" for k in range(measure.dim)]
    writer.writerow(cols + (["weight"] if weights else []))
    for x, w in zip(measure.points, measure.weights):
        writer.writerow([repr(float(v)) for v in x] + ([repr(float(w))] if weights else []))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
