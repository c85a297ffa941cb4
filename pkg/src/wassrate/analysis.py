"""Monte Carlo rate/tail experiments and the analytic concentration calculators."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from statsmodels.stats.proportion import proportion_confint

from .dyadic import DpValue, dp_compact, dp_noncompact, kappa
from .measures import DiscreteMeasure, ReferenceMeasure, empirical, poissonized_sample_size
from .ot_oracle import OracleCapExceeded, OracleError, w1d_exact, w1d_reference, wexact_discrete
from .samplers import ProcessSpec, process_reference, sample_process, simulate_mkv_batch

ORACLE_MODES = ("exact_1d", "lp_vs_proxy", "dp_only")
DEFAULT_BUDGET = 10**9  # reps * max(N)


class BudgetExceeded(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# calculators


def f_fn(x):
    """``(1 + x) log(1 + x) - x``."""
    x = np.asarray(x, dtype=float)
    out = (1 + x) * np.log1p(x) - x
    return float(out) if out.ndim == 0 else out


def g_fn(x):
    """``(x log x - x + 1)`` for ``x >= 1``, zero below."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(x >= 1, x * np.log(np.maximum(x, 1.0)) - x + 1, 0.0)
    return float(val) if val.ndim == 0 else val


class PoissonBounds(NamedTuple):
    mgf: float  # E exp(theta X)
    abs_mgf_bound: float  # bound on E exp(theta |X - lambda|)
    upper_tail: float  # bound on P(X > lambda x)
    two_sided: float  # bound on P(|X - lambda| > lambda x)
    trivial: float  # bound on P(X > lambda x)


def poisson_bounds(lam: float, x: float | None = None, theta: float | None = None) -> PoissonBounds:
    """Poisson(``lam``) moment-generating function and concentration bounds.

    Entries that need the missing argument are ``nan``.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    nan = math.nan
    mgf = abs_mgf = nan
    if theta is not None:
        mgf = math.exp(lam * math.expm1(theta))
        abs_mgf = 2 * math.exp(lam * (math.expm1(theta) - theta)) if theta > 0 else nan
    upper = two = triv = nan
    if x is not None:
        if x <= 0:
            raise ValueError("x must be positive")
        upper = math.exp(-lam * g_fn(x))
        two = 2 * math.exp(-lam * f_fn(x))
        triv = lam
    return PoissonBounds(mgf, abs_mgf, upper, two, triv)


class BinomialBounds(NamedTuple):
    two_sided: float  # bound on P(|X - n prob| >= n prob z)
    trivial: float  # n prob, valid for z > 1 (nan otherwise)
    mgf: float  # E exp(-theta X)
    mgf_bound: float  # exp(-n prob (1 - e^-theta))


def binomial_bounds(n: int, prob: float, z: float | None = None, theta: float | None = None) -> BinomialBounds:
    """Bennett-type bounds for Binomial(``n``, ``prob``)."""
    if n < 1 or not 0 < prob < 1:
        raise ValueError("need n >= 1 and prob in (0, 1)")
    two = triv = mgf = mgf_b = math.nan
    if z is not None:
        if z <= 0:
            raise ValueError("z must be positive")
        indicator = float(prob * (1 + z) <= 1) + float(z <= 1)
        two = indicator * math.exp(-n * prob * f_fn(z))
        triv = n * prob if z > 1 else math.nan
    if theta is not None:
        mgf = (1 - prob + prob * math.exp(-theta)) ** n
        mgf_b = math.exp(-n * prob * (-math.expm1(-theta)))
    return BinomialBounds(two, triv, mgf, mgf_b)


@dataclass(frozen=True)
class EnvelopeParams:
    """Tail-envelope parameters.

    ``regime``: ``exp_strong`` (exponential moment with ``alpha > p``),
    ``exp_weak`` (``alpha < p``) or ``poly`` (moment of order ``q > 2p``).
    ``C`` and ``c`` are free constants.
    """

    regime: str
    alpha: float | None = None
    gamma: float | None = None
    q: float | None = None
    epsilon: float | None = None
    C: float = 1.0
    c: float = 1.0
    variant: str | None = None  # "log_corrected" for the alternative exp_weak b-branch

    def validate(self, p: float) -> None:
        if self.C <= 0 or self.c <= 0:
            raise ValueError("C and c must be positive")
        if self.regime == "exp_strong":
            if self.alpha is None or not self.alpha > p:
                raise ValueError("exp_strong needs alpha > p")
        elif self.regime == "exp_weak":
            if self.alpha is None or not 0 < self.alpha < p:
                raise ValueError("exp_weak needs alpha in (0, p)")
            if self.variant is None and (self.epsilon is None or not 0 < self.epsilon < self.alpha):
                raise ValueError("exp_weak needs epsilon in (0, alpha)")
        elif self.regime == "poly":
            if self.q is None or not self.q > 2 * p:
                raise ValueError("poly needs q > 2p")
            if self.epsilon is None or not 0 < self.epsilon < self.q:
                raise ValueError("poly needs epsilon in (0, q)")
        else:
            raise ValueError(f"unknown regime {self.regime!r}")


def envelope(params: EnvelopeParams, p: float, d: int, N: int, x: float) -> tuple[float, float]:
    """``(a(N, x) 1_{x <= 1}, b(N, x))`` of the concentration envelope."""
    params.validate(p)
    if N < 1 or x <= 0:
        raise ValueError("need N >= 1 and x > 0")
    C, c = params.C, params.c
    if x > 1:
        a_val = 0.0
    elif p > d / 2:
        a_val = C * math.exp(-c * N * x * x)
    elif p == d / 2:
        a_val = C * math.exp(-c * N * (x / math.log(2 + 1 / x)) ** 2)
    elif p >= 1:
        a_val = C * math.exp(-c * N * x ** (d / p))
    else:
        raise ValueError("the a-branch is only available for p >= 1 when p < d/2")

    if params.regime == "exp_strong":
        b_val = C * math.exp(-c * N * x ** (params.alpha / p)) if x > 1 else 0.0
    elif params.regime == "exp_weak":
        al = params.alpha
        if params.variant == "log_corrected":
            delta = 2 * p / al - 1
            b_val = C * math.exp(-c * N * x * x * math.log(1 + N) ** (-delta)) + C * math.exp(-c * (N * x) ** (al / p))
        elif x <= 1:
            b_val = C * math.exp(-c * (N * x) ** ((al - params.epsilon) / p))
        else:
            b_val = C * math.exp(-c * (N * x) ** (al / p))
    else:
        b_val = C * N * (N * x) ** (-(params.q - params.epsilon) / p)
    return a_val, b_val


def predicted_rate_exponent(p: float, d: int, q: float = math.inf) -> float:
    """Exponent of the slowest term in the moment-rate bound (log factor ignored)."""
    if p > d / 2:
        main = -0.5
    elif p == d / 2:
        main = -0.5
    else:
        main = -p / d
    tail = -1.0 if math.isinf(q) else -(q - p) / q
    return max(main, tail)


def markov_rate_band(p: float, d: int, q: float, r: float) -> tuple[float, float]:
    """Exponents with ``(q, d)`` and with ``(q_r, d_r) = (q(r-1)/r, d(r+1)/r)``."""
    q_r = q * (r - 1) / r if math.isfinite(q) else q
    d_r = d * (r + 1) / r
    iid = predicted_rate_exponent(p, d, q)
    chain = predicted_rate_exponent(p, d_r, q_r)
    return (min(iid, chain), max(iid, chain))


# ---------------------------------------------------------------------------
# tables


@dataclass
class RateRow:
    N: int
    mean_Tp: float
    mean_Dp: float
    std_err: float
    reps: int
    std_err_Dp: float = math.nan
    dominance_violations: int = 0


@dataclass
class RateTable:
    rows: list[RateRow]
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("N", "mean_Tp", "mean_Dp", "std_err", "reps", "std_err_Dp", "dominance_violations")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        return _table_csv(self.COLUMNS, [asdict(r) for r in self.rows], self.metadata)

    def to_json(self) -> str:
        return _table_json(self.metadata, [asdict(r) for r in self.rows])


@dataclass
class TailRow:
    x: float
    empirical_prob: float
    ci_low: float
    ci_high: float
    envelope_a: float = math.nan
    envelope_b: float = math.nan


@dataclass
class TailTable:
    N: int
    rows: list[TailRow]
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("x", "empirical_prob", "ci_low", "ci_high", "envelope_a", "envelope_b")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        return _table_csv(self.COLUMNS, [asdict(r) for r in self.rows], {"N": self.N, **self.metadata})

    def to_json(self) -> str:
        return _table_json({"N": self.N, **self.metadata}, [asdict(r) for r in self.rows])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _table_csv(columns, rows, metadata) -> str:
    buf = io.StringIO()
    for line in json.dumps(metadata, sort_keys=True, default=_json_default, indent=None).splitlines():
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    return repr(o)


def _table_json(metadata, rows) -> str:
    return json.dumps({"metadata": metadata, "rows": rows}, sort_keys=True, indent=2, default=_json_default) + "\n"


def wilson_interval(successes: int, trials: int, alpha: float = 0.05) -> tuple[float, float]:
    lo, hi = proportion_confint(successes, trials, alpha=alpha, method="wilson")
    # endpoints are exact at 0 and `trials`; statsmodels leaves rounding residue
    lo = 0.0 if successes == 0 else float(lo)
    hi = 1.0 if successes == trials else float(hi)
    return lo, hi


# ---------------------------------------------------------------------------
# Monte Carlo


def task_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for one Monte Carlo task, fixed by ``(seed, key)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def _is_unit_cube_law(ref: ReferenceMeasure) -> bool:
    from .dyadic import _reference_in_unit_cube

    return ref.has_box_masses and _reference_in_unit_cube(ref)


def _dp_against(mu: DiscreteMeasure, ref, p: float, depth) -> DpValue:
    if isinstance(ref, ReferenceMeasure) and _is_unit_cube_law(ref) and np.all(mu.points > -1) and np.all(mu.points <= 1):
        return dp_compact(mu, ref, p, depth)
    return dp_noncompact(mu, ref, p, depth)


@dataclass(frozen=True)
class _Job:
    process: ProcessSpec
    p: float
    oracle_mode: str
    depth: int | None
    with_dp: bool
    seed: int
    proxy: DiscreteMeasure | None
    max_entries: int
    poissonized: bool = False


def _one_draw(job: _Job, n: int, key: tuple) -> tuple[float, float, float, bool]:
    """(T_p or nan, D_p or nan, D_p truncation, dominance violated) for one sample."""
    rng = task_rng(job.seed, *key)
    ref = process_reference(job.process)
    n_draw = poissonized_sample_size(n, rng) if job.poissonized else n
    if n_draw == 0:
        return 0.0, 0.0, 0.0, False
    mu = empirical(sample_process(job.process, n_draw, rng))
    tp = math.nan
    if job.oracle_mode == "exact_1d":
        if mu.dim != 1 or job.p < 1:
            raise OracleError("exact_1d needs d = 1 and p >= 1")
        tp = w1d_exact(mu, ref.as_discrete(), job.p) if ref.is_discrete else w1d_reference(mu, ref, job.p)
    elif job.oracle_mode == "lp_vs_proxy":
        target = ref.as_discrete() if ref.is_discrete else job.proxy
        tp = wexact_discrete(mu, target, job.p, max_entries=job.max_entries)[0]
    dp = trunc = math.nan
    violated = False
    if job.with_dp or job.oracle_mode == "dp_only":
        res = _dp_against(mu, ref, job.p, job.depth)
        dp, trunc = res.value, res.truncation_bound
        if job.oracle_mode == "exact_1d":
            violated = tp > kappa(job.p, mu.dim) * (dp + trunc) * (1 + 1e-9)
    if job.poissonized:
        scale = n_draw / n
        tp, dp, trunc = tp * scale, dp * scale, trunc * scale
    return tp, dp, trunc, violated


def _run_chunk(args):
    job, tasks = args
    return [_one_draw(job, n, key) for n, key in tasks]


def _run_tasks(job: _Job, tasks: list, workers: int) -> list:
    if workers <= 1 or len(tasks) < 2:
        return _run_chunk((job, tasks))
    # contiguous chunks, concatenated in order: output independent of scheduling
    k = min(len(tasks), workers * 4)
    bounds = np.linspace(0, len(tasks), k + 1).astype(int)
    chunks = [(job, tasks[bounds[i]:bounds[i + 1]]) for i in range(k)]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        out = []
        for part in ex.map(_run_chunk, chunks):
            out.extend(part)
    return out


def _process_metadata(process: ProcessSpec) -> dict:
    meta = process.to_dict()
    if process.reference is not None:
        ref = process.reference
        meta["reference"] = {"kind": ref.kind, "dim": ref.dim,
                             "params": {k: v for k, v in ref.params.items() if k not in ("marginals", "measure")}}
    return meta


def mc_mean_distance(process: ProcessSpec, p: float, N_grid: Sequence[int], reps: int, oracle_mode: str,
                     seed: int, *, workers: int = 1, depth: int | None = None, with_dp: bool = True,
                     proxy_factor: int = 20, max_entries: int = 10**7, budget: int = DEFAULT_BUDGET,
                     on_row=None) -> RateTable:
    """Mean ``T_p(mu_N, mu)`` and ``D_p(mu_N, mu)`` over ``reps`` draws per ``N``.

    ``oracle_mode``: ``exact_1d`` (quantile coupling against the exact law),
    ``lp_vs_proxy`` (network simplex against one i.i.d. proxy of size
    ``proxy_factor * max(N)``) or ``dp_only``.
    """
    if oracle_mode not in ORACLE_MODES:
        raise ValueError(f"oracle_mode must be one of {ORACLE_MODES}")
    if reps < 2:
        raise ValueError("need reps >= 2")
    grid = sorted(int(n) for n in N_grid)
    if not grid or grid[0] < 1:
        raise ValueError("N_grid must hold positive integers")
    if reps * grid[-1] > budget:
        raise BudgetExceeded(f"reps * max(N) = {reps * grid[-1]} exceeds the budget {budget}")
    ref = process_reference(process)
    proxy = None
    meta = {"p": p, "d": process.dim, "process": _process_metadata(process), "seed": int(seed),
            "oracle_mode": oracle_mode, "reps": reps, "depth": depth}
    if oracle_mode == "lp_vs_proxy" and not ref.is_discrete:
        m = max(proxy_factor, 20) * grid[-1]
        if grid[-1] * m > max_entries:
            raise OracleCapExceeded(f"proxy of size {m} against N={grid[-1]} exceeds {max_entries} cost entries")
        proxy = empirical(ref.sample(m, task_rng(seed, 2**31 - 1)))
        meta["proxy_size"] = m
        meta["proxy_note"] = "T_p measured against an i.i.d. proxy; bias of order the proxy's own rate is not corrected"
    job = _Job(process, float(p), oracle_mode, depth, with_dp, int(seed), proxy, max_entries)
    tasks = [(n, (i, r)) for i, n in enumerate(grid) for r in range(reps)]
    results = _run_tasks(job, tasks, workers)
    rows = []
    for i, n in enumerate(grid):
        chunk = np.array([results[i * reps + r][:3] for r in range(reps)], dtype=float)
        viol = sum(results[i * reps + r][3] for r in range(reps))
        tp, dp = chunk[:, 0], chunk[:, 1]
        se_t = float(np.std(tp, ddof=1) / math.sqrt(reps)) if not np.isnan(tp).all() else math.nan
        se_d = float(np.std(dp, ddof=1) / math.sqrt(reps)) if not np.isnan(dp).all() else math.nan
        rows.append(RateRow(n, float(np.mean(tp)), float(np.mean(dp)),
                            se_t if not math.isnan(se_t) else se_d, reps, se_d, int(viol)))
        if on_row is not None:
            on_row(rows[-1])
    return RateTable(rows, meta)


class RateFit(NamedTuple):
    exponent: float
    intercept: float
    r_squared: float


def fit_rate(table, column: str = "mean_Tp") -> RateFit:
    """Least squares of ``log(column)`` on ``log N``; the slope is the rate exponent.

    ``table`` is a :class:`RateTable` or a pair ``(N, values)``.
    """
    if isinstance(table, RateTable):
        n = table.column("N")
        y = table.column(column)
    else:
        n, y = (np.asarray(a, dtype=float) for a in table)
    if len(n) < 4:
        raise ValueError("need at least 4 rows")
    if np.any(~(y > 0)):
        raise ValueError("all means must be positive")
    lx, ly = np.log(n), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return RateFit(float(slope), float(intercept), r2)


def mc_tail(process: ProcessSpec, p: float, N: int, x_grid: Sequence[float], reps: int, oracle_mode: str,
            seed: int, *, workers: int = 1, depth: int | None = None, poissonized: bool = False,
            envelope_params: EnvelopeParams | None = None, proxy_factor: int = 20,
            max_entries: int = 10**7, budget: int = DEFAULT_BUDGET) -> TailTable:
    """Empirical ``P(T_p(mu_N, mu) >= x)`` with Wilson intervals.

    With ``poissonized=True`` the statistic is ``(K / N) D_p(Psi, mu)`` for a
    Poisson(``N``) sample size ``K``, i.e. the event ``K D_p >= N x``.
    In ``dp_only`` mode the statistic is ``D_p``.
    """
    if oracle_mode not in ORACLE_MODES:
        raise ValueError(f"oracle_mode must be one of {ORACLE_MODES}")
    if reps * N > budget:
        raise BudgetExceeded(f"reps * N = {reps * N} exceeds the budget {budget}")
    ref = process_reference(process)
    proxy = None
    meta = {"p": p, "d": process.dim, "process": _process_metadata(process), "seed": int(seed),
            "oracle_mode": oracle_mode, "reps": reps, "poissonized": poissonized, "depth": depth}
    if oracle_mode == "lp_vs_proxy" and not ref.is_discrete:
        m = max(proxy_factor, 20) * N
        if N * m > max_entries:
            raise OracleCapExceeded(f"proxy of size {m} against N={N} exceeds {max_entries} cost entries")
        proxy = empirical(ref.sample(m, task_rng(seed, 2**31 - 1)))
        meta["proxy_size"] = m
    with_dp = poissonized or oracle_mode == "dp_only"
    job = _Job(process, float(p), oracle_mode, depth, with_dp, int(seed), proxy, max_entries, poissonized)
    results = _run_tasks(job, [(N, (0, r)) for r in range(reps)], workers)
    stat_col = 1 if (poissonized or oracle_mode == "dp_only") else 0
    stats_ = np.array([r[stat_col] for r in results], dtype=float)
    meta["statistic"] = "D_p" if stat_col == 1 else "T_p"
    meta["max_statistic"] = float(stats_.max())
    rows = []
    for x in sorted(float(v) for v in x_grid):
        k = int(np.sum(stats_ >= x))
        lo, hi = wilson_interval(k, reps)
        row = TailRow(x, k / reps, lo, hi)
        if envelope_params is not None and x > 0:
            row.envelope_a, row.envelope_b = envelope(envelope_params, p, process.dim, N, x)
        rows.append(row)
    return TailTable(N, rows, meta)


# ---------------------------------------------------------------------------
# McKean-Vlasov


@dataclass
class MkvRow:
    N: int
    mean_discrepancy: float
    std_err: float
    mean_variance: float
    reps: int


@dataclass
class MkvTable:
    rows: list[MkvRow]
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("N", "mean_discrepancy", "std_err", "mean_variance", "reps")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        return _table_csv(self.COLUMNS, [asdict(r) for r in self.rows], self.metadata)

    def to_json(self) -> str:
        return _table_json(self.metadata, [asdict(r) for r in self.rows])


def mc_mkv(spec: ProcessSpec, N_grid: Sequence[int], reps: int, seed: int, *, batch: int = 50,
           on_row=None) -> MkvTable:
    """Paired discrepancy ``(1/N) sum_i |X^{i,N}_T - X^i_T|^2`` and cloud variance per ``N``.

    Repetitions run in fixed batches, each with its own derived generator.
    """
    grid = sorted(int(n) for n in N_grid)
    rows = []
    for i, n in enumerate(grid):
        disc, var = [], []
        for b, start in enumerate(range(0, reps, batch)):
            size = min(batch, reps - start)
            res = simulate_mkv_batch(spec, n, size, task_rng(seed, i, b))
            disc.append(res.discrepancy)
            var.append(res.interacting.var(axis=1).sum(axis=-1))
        disc = np.concatenate(disc)
        var = np.concatenate(var)
        se = float(np.std(disc, ddof=1) / math.sqrt(reps)) if reps > 1 else math.nan
        rows.append(MkvRow(n, float(disc.mean()), se, float(var.mean()), reps))
        if on_row is not None:
            on_row(rows[-1])
    meta = {"process": spec.to_dict(), "seed": int(seed), "reps": reps, "batch": batch}
    return MkvTable(rows, meta)


__all__ = [
    "f_fn", "g_fn", "poisson_bounds", "binomial_bounds", "PoissonBounds", "BinomialBounds",
    "EnvelopeParams", "envelope", "predicted_rate_exponent", "markov_rate_band",
    "RateRow", "RateTable", "TailRow", "TailTable", "MkvRow", "MkvTable",
    "mc_mean_distance", "mc_tail", "mc_mkv", "fit_rate", "RateFit", "wilson_interval", "task_rng",
    "BudgetExceeded", "ORACLE_MODES",
]
