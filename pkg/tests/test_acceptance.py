"""Acceptance criteria 1-12, each at its stated tolerance and runtime budget.

Every test prints one ``C<k> PASS|FAIL`` line; the lines are also collected
in the terminal summary.  Run with ``pytest tests/test_acceptance.py -s``.
"""

import math
import time

import numpy as np
from conftest import ACCEPTANCE_LINES

from wassrate.analysis import binomial_bounds, f_fn, fit_rate, g_fn, mc_mean_distance, mc_mkv, mc_tail, poisson_bounds
from wassrate.cli import main
from wassrate.dyadic import dp_compact, dp_noncompact, kappa
from wassrate.measures import DiscreteMeasure, ReferenceMeasure, empirical
from wassrate.ot_oracle import brute_force_assignment, w1d_exact, wexact_assignment, wexact_discrete
from wassrate.samplers import ProcessSpec, simulate_mkv

RATE_GRID = [100 * 2**k for k in range(8)]  # 100 ... 12800


def report(num, title, passed, detail, elapsed, budget_s):
    in_time = elapsed < budget_s
    ok = bool(passed and in_time)
    line = f"C{num} {'PASS' if ok else 'FAIL'} {title}: {detail}; {elapsed:.1f}s (< {budget_s}s)"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert passed, line
    assert in_time, line


def iid(ref):
    return ProcessSpec("iid", ref.dim, ref)


# -- 1. dominance ---------------------------------------------------------------


def _random_pair(rng, d):
    n, m = (int(k) for k in rng.integers(1, 65, size=2))
    kind = rng.integers(4)
    if kind == 0:  # inside the unit cube
        make = lambda k: rng.uniform(-1, 1, (k, d))
    elif kind == 1:  # coarse grid, exercises cell boundaries
        make = lambda k: rng.integers(-7, 9, (k, d)) / 8.0
    elif kind == 2:  # spread over several shells
        make = lambda k: rng.normal(0, 4, (k, d))
    else:  # heavy tailed
        make = lambda k: rng.standard_cauchy((k, d))
    wa = rng.dirichlet(np.ones(n)) if rng.random() < 0.5 else np.full(n, 1 / n)
    wb = rng.dirichlet(np.ones(m)) if rng.random() < 0.5 else np.full(m, 1 / m)
    return DiscreteMeasure(make(n), wa), DiscreteMeasure(make(m), wb), kind < 2


def test_c1_dominance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    count = violations = noncompact = 0
    worst = 0.0
    for d in (1, 2, 3):
        for p in (0.5, 1.0, 2.0):
            for _ in range(225):
                mu, nu, compact = _random_pair(rng, d)
                dp = dp_compact(mu, nu, p) if compact else dp_noncompact(mu, nu, p)
                noncompact += not compact
                tp = wexact_discrete(mu, nu, p)[0]
                bound = kappa(p, d) * dp.upper
                if tp > bound * (1 + 1e-9) + 1e-12:
                    violations += 1
                if bound > 0:
                    worst = max(worst, tp / bound)
                count += 1
    report(1, "T_p <= kappa (D_p + truncation)", count >= 2000 and violations == 0,
           f"{count} pairs ({noncompact} non-compact), {violations} violations, max T_p/bound {worst:.3f}",
           time.perf_counter() - t0, 120)


# -- 2. oracle consistency ---------------------------------------------------------


def test_c2_oracle_consistency():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(500):
        p = float(rng.choice([1.0, 1.5, 2.0, 3.0]))
        n, m = (int(k) for k in rng.integers(1, 65, size=2))
        a = DiscreteMeasure(rng.normal(0, 3, (n, 1)), rng.dirichlet(np.ones(n)))
        b = DiscreteMeasure(rng.normal(1, 2, (m, 1)), rng.dirichlet(np.ones(m)))
        x, y = w1d_exact(a, b, p), wexact_discrete(a, b, p)[0]
        worst = max(worst, abs(x - y) / max(1.0, abs(y)))
    mismatches = instances = 0
    for n in range(1, 9):
        for _ in range(12 if n < 8 else 4):
            p = float(rng.choice([0.5, 1.0, 2.0]))
            a = empirical(rng.uniform(-1, 1, (n, 2)))
            b = empirical(rng.uniform(-1, 1, (n, 2)))
            brute = brute_force_assignment(a, b, p)
            mismatches += not math.isclose(wexact_assignment(a, b, p), brute, rel_tol=1e-12, abs_tol=1e-15)
            instances += 1
    report(2, "1-D sweep vs LP; assignment vs brute force", worst <= 1e-9 and mismatches == 0,
           f"500 1-D instances max rel diff {worst:.1e}; {instances} assignments, {mismatches} mismatches",
           time.perf_counter() - t0, 60)


# -- 3-7, 10. rates ------------------------------------------------------------------


def _rate(num, title, band, budget_s, process, p, mode, column, reps=200, seed=1, closed=True, **kw):
    t0 = time.perf_counter()
    table = mc_mean_distance(process, p, RATE_GRID, reps, mode, seed, **kw)
    fit = fit_rate(table, column)
    lo, hi = band
    inside = lo <= fit.exponent <= hi if closed else lo < fit.exponent < hi
    viol = int(table.column("dominance_violations").sum())
    report(num, title, inside and viol == 0,
           f"slope {fit.exponent:.4f} (r2 {fit.r_squared:.4f}) in {'[' if closed else '('}{lo}, {hi}"
           f"{']' if closed else ')'}, {viol} dominance violations", time.perf_counter() - t0, budget_s)
    return table, fit


def test_c3_rate_above_half_dimension():
    _rate(3, "uniform d=1 p=1 rate", (-0.60, -0.42), 300, iid(ReferenceMeasure.uniform_cube(1)), 1.0,
          "exact_1d", "mean_Tp")


def _proxy_spot_checks(d, seed):
    # T_p(mu_N, proxy) against kappa D_p(mu_N, proxy): both discrete, so exact
    rng = np.random.default_rng(seed)
    ref = ReferenceMeasure.uniform_cube(d)
    ratios = []
    for n in (100, 200, 400):
        mu = empirical(ref.sample(n, rng))
        proxy = empirical(ref.sample(20 * n, rng))
        tp = wexact_discrete(mu, proxy, 1.0, max_entries=10**7)[0]
        ratios.append(tp / (kappa(1.0, d) * dp_compact(mu, proxy, 1.0).upper))
    return max(ratios)


def test_c4_rate_below_half_dimension():
    t0 = time.perf_counter()
    ratio = _proxy_spot_checks(3, 404)
    table = mc_mean_distance(iid(ReferenceMeasure.uniform_cube(3)), 1.0, RATE_GRID, 200, "dp_only", 1)
    fit = fit_rate(table, "mean_Dp")
    report(4, "uniform d=3 p=1 rate (D_p column)", -0.40 <= fit.exponent <= -0.27 and ratio <= 1,
           f"slope {fit.exponent:.4f} (r2 {fit.r_squared:.4f}) in [-0.40, -0.27]; "
           f"LP spot checks N<=400 max T_p/(kappa D_p) {ratio:.3f}", time.perf_counter() - t0, 600)


def test_c5_rate_at_half_dimension():
    t0 = time.perf_counter()
    ratio = _proxy_spot_checks(2, 505)
    table = mc_mean_distance(iid(ReferenceMeasure.uniform_cube(2)), 1.0, RATE_GRID, 200, "dp_only", 1)
    fit = fit_rate(table, "mean_Dp")
    report(5, "uniform d=2 p=1 rate (D_p column)", -0.50 < fit.exponent < -0.37 and ratio <= 1,
           f"slope {fit.exponent:.4f} (r2 {fit.r_squared:.4f}) in (-0.50, -0.37); "
           f"LP spot checks N<=400 max T_p/(kappa D_p) {ratio:.3f}", time.perf_counter() - t0, 480)


def test_c6_heavy_tail_rate():
    # radial tail index 1.5: moments finite below 1.5, rate exponent -(q - p)/q = -1/3
    _rate(6, "pareto q=1.5 p=1 rate", (-0.45, -0.22), 480, iid(ReferenceMeasure.pareto_radial(1, 1.5)), 1.0,
          "exact_1d", "mean_Tp", reps=1000, with_dp=False)


def test_c7_two_point_rate():
    _rate(7, "two-point p=2 rate", (-0.60, -0.40), 180, iid(ReferenceMeasure.two_point([0.0], [1.0], 0.5)), 2.0,
          "exact_1d", "mean_Tp")


def test_c10_mixing_rate():
    t0 = time.perf_counter()
    # AR(1) with unit innovation scaling has the N(0, 1) marginal of the i.i.d. run
    base = mc_mean_distance(iid(ReferenceMeasure.gaussian(1)), 1.0, RATE_GRID, 200, "exact_1d", 1, with_dp=False)
    chain = mc_mean_distance(ProcessSpec("ar1", 1, a=0.5), 1.0, RATE_GRID, 200, "exact_1d", 1, with_dp=False)
    s_iid, s_ar = fit_rate(base).exponent, fit_rate(chain).exponent
    report(10, "AR(1) a=0.5 vs i.i.d. Gaussian rate", abs(s_ar - s_iid) <= 0.1,
           f"slopes {s_ar:.4f} vs {s_iid:.4f}, |diff| {abs(s_ar - s_iid):.4f} <= 0.1", time.perf_counter() - t0, 360)


# -- 8. concentration calculators ----------------------------------------------------


def test_c8_concentration_calculators():
    t0 = time.perf_counter()
    rng = np.random.default_rng(808)
    draws = 10**6
    checks = violations = 0
    for lam in (5.0, 10.0, 50.0):
        x_all = rng.poisson(lam, draws)
        for x in (0.25, 0.5, 1.0, 2.0):
            freq = np.mean(np.abs(x_all - lam) > lam * x)
            violations += freq > poisson_bounds(lam, x=x).two_sided
            checks += 1
    for n in (20, 100, 1000):
        for prob in (0.05, 0.3, 0.7):
            x_all = rng.binomial(n, prob, draws)
            mean = n * prob
            for z in (0.25, 0.5, 1.0, 2.0):
                freq = np.mean(np.abs(x_all - mean) >= mean * z)
                violations += freq > binomial_bounds(n, prob, z=z).two_sided
                checks += 1
    exact = abs(f_fn(1.0) - (2 * math.log(2) - 1)) <= 1e-12 and abs(g_fn(math.e) - 1) <= 1e-12
    report(8, "Poisson and binomial bounds dominate MC frequencies", violations == 0 and exact,
           f"{checks} grid points x 10^6 draws, {violations} violations; f(1), g(e) exact to 1e-12: {exact}",
           time.perf_counter() - t0, 180)


# -- 9. tail shape -----------------------------------------------------------------------


def test_c9_tail_shape():
    t0 = time.perf_counter()
    reps, n = 5000, 500
    x_grid = list(np.linspace(0.0, 0.12, 41))
    table = mc_tail(iid(ReferenceMeasure.gaussian(1)), 1.0, n, x_grid, reps, "exact_1d", 9)
    x = table.column("x")
    prob = table.column("empirical_prob")
    # central range: both the tail and its complement resolved by at least ~25 reps
    central = (prob >= 0.005) & (prob <= 0.99)
    slope = np.polyfit(x[central] ** 2, np.log(prob[central]), 1)[0]
    lows, highs = table.column("ci_low"), table.column("ci_high")
    bad = [i for i in range(1, len(prob)) if prob[i] > prob[i - 1] and lows[i] > highs[i - 1]]
    report(9, "gaussian N=500 log-tail vs x^2", slope < 0 and not bad and central.sum() >= 5,
           f"slope {slope:.1f} over {int(central.sum())} central points, {len(bad)} monotonicity violations "
           f"outside CI overlap", time.perf_counter() - t0, 300)


# -- 11. McKean-Vlasov ------------------------------------------------------------------------


def test_c11_mckean_vlasov():
    t0 = time.perf_counter()
    spec = ProcessSpec("mkv", 1, potential="quadratic", beta=1.0, T=10.0, dt=0.005)
    var = float(simulate_mkv(spec, 2000, np.random.default_rng(1111)).interacting.var())
    table = mc_mkv(spec, [50, 100, 200, 400, 800, 1600], 200, 7)
    fit = fit_rate((table.column("N"), table.column("mean_discrepancy")))
    report(11, "McKean-Vlasov quadratic case", abs(var - 0.5) <= 0.05 and -1.3 <= fit.exponent <= -0.7,
           f"variance at N=2000 {var:.4f} (0.5 +- 0.05); discrepancy slope {fit.exponent:.4f} in [-1.3, -0.7]",
           time.perf_counter() - t0, 600)


# -- 12. determinism ----------------------------------------------------------------------------


CONFIGS = {
    "rates": """
seed = 12
reps = 20
N_grid = [50, 100, 200]
oracle_mode = "exact_1d"
[reference]
kind = "gaussian"
dim = 1
""",
    "rates_dp": """
seed = 13
reps = 10
N_grid = [50, 100]
oracle_mode = "dp_only"
[reference]
kind = "uniform_cube"
dim = 2
""",
    "tails": """
seed = 14
reps = 40
N = 100
x_grid = [0.0, 0.05, 0.1]
poissonized = true
oracle_mode = "exact_1d"
[reference]
kind = "uniform_cube"
dim = 1
""",
    "mkv": """
seed = 15
reps = 4
N_grid = [20, 40]
[process]
kind = "mkv"
T = 0.5
dt = 0.01
""",
    "bounds": """
p = 1.0
[envelope]
regime = "exp_strong"
alpha = 2.0
gamma = 1.0
""",
}


def test_c12_cli_determinism(tmp_path, capsys):
    t0 = time.perf_counter()
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("0.1,0.2\n-0.4,0.5\n0.9,-0.9\n")
    b.write_text("x,y,weight\n0.3,0.3,2\n-0.6,0.1,1\n")
    runs = {name: (name.split("_")[0], ["--config", str(tmp_path / f"{name}.toml")]) for name in CONFIGS}
    for name, text in CONFIGS.items():
        (tmp_path / f"{name}.toml").write_text(text)
    runs["dist"] = ("dist", [str(a), str(b), "--p", "2"])
    differing = []
    for name, (cmd, args) in runs.items():
        outs = []
        for tag, workers in (("w1", "1"), ("w1b", "1"), ("w4", "4")):
            out = tmp_path / f"{name}_{tag}.out"
            code = main([cmd, *args, "--workers", workers, "--out", str(out)])
            assert code == 0, (name, code)
            outs.append(out.read_bytes())
        if len(set(outs)) != 1:
            differing.append(name)
    capsys.readouterr()
    report(12, "CLI byte-identical reruns at workers 1 and 4", not differing,
           f"{len(runs)} experiments, differing: {differing or 'none'}", time.perf_counter() - t0, 300)
