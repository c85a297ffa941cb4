"""Sample generators: i.i.d. laws, Gaussian AR(1) chains, McKean-Vlasov particles."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.signal import lfilter

from .measures import ReferenceMeasure


class SamplerError(ValueError):
    pass


class MkvInstability(RuntimeError):
    """Raised when the particle scheme produces non-finite states."""


@dataclass(frozen=True)
class ProcessSpec:
    """Description of a sampled process.

    ``kind`` is one of ``iid``, ``ar1``, ``markov_ar1`` or ``mkv``.  For the
    chains, ``a`` is the AR coefficient and ``init_mean``/``init_var`` describe
    a Gaussian initial law (``None`` means the stationary law).  For ``mkv``,
    ``potential`` is ``quadratic`` (with ``beta``) or ``power`` (with
    ``alpha > 2``); the interaction is always ``|x|^2 / 2``.
    """

    kind: str
    dim: int = 1
    reference: ReferenceMeasure | None = None
    a: float = 0.0
    init_mean: float | None = None
    init_var: float | None = None
    r: float = 4.0
    potential: str = "quadratic"
    beta: float = 1.0
    alpha: float = 4.0
    dt: float = 0.005
    T: float = 10.0
    x0: float = 0.0
    scheme: str = "euler-maruyama"
    proxy_particles: int = 10_000

    def __post_init__(self):
        if self.kind not in ("iid", "ar1", "markov_ar1", "mkv"):
            raise SamplerError(f"unknown process kind {self.kind!r}")
        if self.dim < 1:
            raise SamplerError("dim must be >= 1")
        if self.kind == "iid" and self.reference is None:
            raise SamplerError("iid process needs a reference measure")
        if self.kind in ("ar1", "markov_ar1") and not abs(self.a) < 1:
            raise SamplerError("AR coefficient must satisfy |a| < 1 for summable correlations")
        if self.kind == "mkv":
            if self.potential not in ("quadratic", "power"):
                raise SamplerError("potential must be 'quadratic' or 'power'")
            if self.potential == "power" and not self.alpha > 2:
                raise SamplerError("power potential requires alpha > 2")
            if self.potential == "quadratic" and not self.beta > 0:
                raise SamplerError("quadratic potential requires beta > 0")
            if not self.dt > 0 or self.T < self.dt:
                raise SamplerError("need dt > 0 and T >= dt")

    @property
    def stationary(self) -> ReferenceMeasure:
        """Invariant law of the AR(1) chains: standard Gaussian."""
        return ReferenceMeasure.gaussian(self.dim)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "reference"}
        return out


def sample_iid(ref: ReferenceMeasure, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise SamplerError("n must be >= 1")
    return ref.sample(n, rng)


def _ar1_path(a: float, x1: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    d = x1.shape[-1]
    innov = math.sqrt(1 - a * a) * rng.standard_normal((n - 1, d)) if n > 1 else np.zeros((0, d))
    drive = np.concatenate([x1.reshape(1, d), innov])
    # y_k = a y_{k-1} + drive_k with y_1 = x1
    return lfilter([1.0], [1.0, -a], drive, axis=0)


def sample_ar1(spec: ProcessSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Stationary Gaussian AR(1): ``X_{k+1} = a X_k + sqrt(1 - a^2) xi_k``, ``X_1 ~ N(0, 1)``.

    Its maximal correlation at lag ``k`` is ``|a|^k``, so the chain is
    rho-mixing with a summable sequence.
    """
    if n < 1:
        raise SamplerError("n must be >= 1")
    x1 = rng.standard_normal(spec.dim)
    return _ar1_path(spec.a, x1, n, rng)


def density_ratio_norm(mean: float, var: float, r: float) -> float:
    """``||d nu / d pi||_{L^r(pi)}`` for ``nu = N(mean, var)`` and ``pi = N(0, 1)``.

    Infinite unless ``var < r / (r - 1)``.
    """
    a = r / var - (r - 1)
    if a <= 0:
        return math.inf
    log_val = -0.5 * r * math.log(var) - 0.5 * math.log(a) + (r * mean / var) ** 2 / (2 * a) - r * mean * mean / (2 * var)
    return math.exp(log_val / r)


def sample_markov(spec: ProcessSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """AR(1) chain with a selectable Gaussian initial law.

    The initial law must have a density ratio in ``L^r`` of the invariant
    law; for Gaussians that means ``init_var < r / (r - 1)``.
    """
    if n < 1:
        raise SamplerError("n must be >= 1")
    if spec.r <= 2:
        raise SamplerError("the integrability exponent r must exceed 2")
    if spec.init_mean is None and spec.init_var is None:
        x1 = rng.standard_normal(spec.dim)
    else:
        m = 0.0 if spec.init_mean is None else spec.init_mean
        v = 1.0 if spec.init_var is None else spec.init_var
        if not v > 0:
            raise SamplerError("initial variance must be positive")
        if not math.isfinite(density_ratio_norm(m, v, spec.r)):
            raise SamplerError(
                f"initial law N({m}, {v}) has d nu/d pi outside L^{spec.r}(pi): need variance < {spec.r / (spec.r - 1):.4g}"
            )
        x1 = m + math.sqrt(v) * rng.standard_normal(spec.dim)
    return _ar1_path(spec.a, x1, n, rng)


def sample_process(spec: ProcessSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "iid":
        return sample_iid(spec.reference, n, rng)
    if spec.kind == "ar1":
        return sample_ar1(spec, n, rng)
    if spec.kind == "markov_ar1":
        return sample_markov(spec, n, rng)
    raise SamplerError("mkv processes are simulated with simulate_mkv")


def process_reference(spec: ProcessSpec) -> ReferenceMeasure:
    """The law the empirical measure of ``spec`` is compared with."""
    if spec.kind == "iid":
        return spec.reference
    if spec.kind in ("ar1", "markov_ar1"):
        return spec.stationary
    raise SamplerError("no analytic reference for mkv processes")


# ---------------------------------------------------------------------------
# McKean-Vlasov


class MkvResult(NamedTuple):
    interacting: np.ndarray  # (reps, N, d) endpoint states
    nonlinear: np.ndarray
    discrepancy: np.ndarray  # (reps,) of (1/N) sum_i |X^{i,N}_T - X^i_T|^2
    trajectories: list | None


def _grad_v(spec: ProcessSpec, x: np.ndarray) -> np.ndarray:
    if spec.potential == "quadratic":
        return spec.beta * x
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    return spec.alpha * r ** (spec.alpha - 2) * x


def _tamed_dt(spec: ProcessSpec, *states) -> float:
    if spec.potential == "quadratic":
        return spec.dt
    big = max(float(np.max(np.linalg.norm(s, axis=-1))) if s.size else 0.0 for s in states)
    return spec.dt / (1.0 + big ** (spec.alpha - 2))


def simulate_mkv_batch(spec: ProcessSpec, n_particles: int, reps: int, rng: np.random.Generator, *,
                       noise: bool = True, record_every: int | None = None) -> MkvResult:
    """Euler-Maruyama for ``reps`` independent copies of the ``N``-particle system.

    Each copy also carries ``N`` nonlinear particles driven by the same
    Brownian increments.  Their interaction drift ``x - E X_t`` uses the exact
    mean ``x0 exp(-beta t)`` for the quadratic potential, and the mean of an
    auxiliary ``proxy_particles`` system otherwise.  The power potential uses
    a step ``dt / (1 + max|x|^(alpha - 2))``.
    """
    if spec.kind != "mkv":
        raise SamplerError("simulate_mkv needs an mkv ProcessSpec")
    if n_particles < 2:
        raise SamplerError("need at least two particles")
    d = spec.dim
    shape = (reps, n_particles, d)
    x_int = np.full(shape, spec.x0, dtype=float)
    x_non = np.full(shape, spec.x0, dtype=float)
    aux = None
    if spec.potential == "power":
        aux = np.full((spec.proxy_particles, d), spec.x0, dtype=float)
    t = 0.0
    step = 0
    traj = [] if record_every else None
    while t < spec.T - 1e-12:
        h = min(_tamed_dt(spec, x_int, x_non, *([] if aux is None else [aux])), spec.T - t)
        if spec.potential == "quadratic":
            mean_law = spec.x0 * math.exp(-spec.beta * t)
        else:
            mean_law = aux.mean(axis=0)
        emp_mean = x_int.mean(axis=1, keepdims=True)
        if noise:
            dB = math.sqrt(2 * h) * rng.standard_normal(shape)
        else:
            dB = 0.0
        drift_int = -_grad_v(spec, x_int) - (x_int - emp_mean)
        drift_non = -_grad_v(spec, x_non) - (x_non - mean_law)
        if aux is not None:
            aux_noise = math.sqrt(2 * h) * rng.standard_normal(aux.shape) if noise else 0.0
            aux = aux + h * (-_grad_v(spec, aux) - (aux - aux.mean(axis=0))) + aux_noise
        with np.errstate(over="ignore", invalid="ignore"):
            x_int = x_int + h * drift_int + dB
            x_non = x_non + h * drift_non + dB
        t += h
        step += 1
        if not (np.all(np.isfinite(x_int)) and np.all(np.isfinite(x_non))):
            raise MkvInstability(
                f"non-finite particle state at step {step} (t={t:.4g}, dt={h:.3g}); reduce dt"
            )
        if traj is not None and step % record_every == 0:
            traj.append((step, x_int[0].copy()))
    disc = np.mean(np.sum((x_int - x_non) ** 2, axis=-1), axis=1)
    return MkvResult(x_int, x_non, disc, traj)


def simulate_mkv(spec: ProcessSpec, n_particles: int, rng: np.random.Generator, *, noise: bool = True,
                 record_every: int | None = None):
    """Single run: ``(interacting, nonlinear, discrepancy)`` endpoint clouds at time ``T``."""
    res = simulate_mkv_batch(spec, n_particles, 1, rng, noise=noise, record_every=record_every)
    return MkvResult(res.interacting[0], res.nonlinear[0], res.discrepancy[:1], res.trajectories)


def write_trajectories(trajectories, path) -> None:
    """CSV rows ``step, particle, x0, x1, ...`` from ``record_every`` snapshots."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        d = trajectories[0][1].shape[-1] if trajectories else 1
        writer.writerow(["step", "particle"] + [f"x{k}" for k in range(d)])
        for step, states in trajectories:
            for i, x in enumerate(states):
                writer.writerow([step, i] + [repr(float(v)) for v in x])


__all__ = [
    "ProcessSpec",
    "SamplerError",
    "MkvInstability",
    "MkvResult",
    "sample_iid",
    "sample_ar1",
    "sample_markov",
    "sample_process",
    "process_reference",
    "density_ratio_norm",
    "simulate_mkv",
    "simulate_mkv_batch",
    "write_trajectories",
]
