import json

import pytest

from wassrate.cli import config_hash, main


def write(path, text):
    path.write_text(text)
    return str(path)


def data_lines(text):
    return [l for l in text.splitlines() if not l.startswith("#")]


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_dist_two_diracs(tmp_path, capsys):
    a = write(tmp_path / "a.csv", "0.25\n")
    b = write(tmp_path / "b.csv", "0.75\n")
    code, out, _ = run(["dist", a, b, "--p", "1", "--format", "json"], capsys)
    assert code == 0
    row = json.loads(out)["rows"][0]
    assert row["T_p"] == pytest.approx(0.5)
    assert row["kappa"] == pytest.approx(2**1.5 * 3)
    assert row["dominance_ratio"] == pytest.approx(0.1178511301977579, rel=1e-12)
    assert row["dominance_holds"]


def test_dist_identical_clouds(tmp_path, capsys):
    a = write(tmp_path / "a.csv", "x,y\n0.1,0.2\n-0.5,0.3\n")
    code, out, _ = run(["dist", a, a], capsys)
    assert code == 0
    header, values = data_lines(out)
    row = dict(zip(header.split(","), values.split(",")))
    assert float(row["D_p"]) == 0.0 and float(row["T_p"]) == 0.0 and float(row["dominance_ratio"]) == 0.0


def test_dist_plan_out(tmp_path, capsys):
    a = write(tmp_path / "a.csv", "0.1\n0.6\n")
    b = write(tmp_path / "b.csv", "-0.3\n")
    plan = tmp_path / "plan.csv"
    assert run(["dist", a, b, "--plan-out", str(plan)], capsys)[0] == 0
    lines = plan.read_text().splitlines()
    assert lines[0] == "src_index,tgt_index,mass"
    assert sum(float(l.split(",")[2]) for l in lines[1:]) == pytest.approx(1.0)


def test_dist_missing_file(tmp_path, capsys):
    a = write(tmp_path / "a.csv", "0.1\n")
    code, _, err = run(["dist", a, str(tmp_path / "nope.csv")], capsys)
    assert code == 2 and "nope.csv" in err


def test_dist_malformed_file(tmp_path, capsys):
    a = write(tmp_path / "a.csv", "0.1\n")
    bad = write(tmp_path / "bad.csv", "0.1,0.2\nfoo,1\n")
    assert run(["dist", a, bad], capsys)[0] == 2


RATES = """
seed = 11
p = 1.0
reps = 6
N_grid = [80, 20]
oracle_mode = "exact_1d"

[reference]
kind = "uniform_cube"
dim = 1
"""


def test_rates_rows_sorted(tmp_path, capsys):
    cfg = write(tmp_path / "r.toml", RATES)
    code, out, err = run(["rates", "--config", cfg], capsys)
    assert code == 0
    lines = data_lines(out)
    assert len(lines) == 3
    assert [int(l.split(",")[0]) for l in lines[1:]] == [20, 80]
    assert "N=20" in err


def test_rates_reproducible_and_worker_invariant(tmp_path, capsys):
    cfg = write(tmp_path / "r.toml", RATES)
    outs = []
    for w in ("1", "1", "2"):
        path = tmp_path / f"out{len(outs)}.csv"
        assert run(["rates", "--config", cfg, "--workers", w, "--out", str(path)], capsys)[0] == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_config_round_trip(tmp_path, capsys):
    cfg = write(tmp_path / "r.toml", RATES)
    code, out, _ = run(["rates", "--config", cfg, "--format", "json"], capsys)
    meta = json.loads(out)["metadata"]
    assert meta["seed"] == 11
    assert config_hash(meta["config"]) == meta["config_hash"]
    # flag overrides change the hash
    code, out2, _ = run(["rates", "--config", cfg, "--format", "json", "--seed", "12"], capsys)
    assert json.loads(out2)["metadata"]["config_hash"] != meta["config_hash"]


def test_missing_seed(tmp_path, capsys):
    cfg = write(tmp_path / "r.toml", RATES.replace("seed = 11", ""))
    code, _, err = run(["rates", "--config", cfg], capsys)
    assert code == 2 and "seed" in err


def test_bad_config(tmp_path, capsys):
    assert run(["rates", "--config", str(tmp_path / "missing.toml")], capsys)[0] == 2
    bad = write(tmp_path / "bad.toml", "seed = \n")
    assert run(["rates", "--config", bad], capsys)[0] == 2
    cfg = write(tmp_path / "r.toml", RATES.replace('"exact_1d"', '"sinkhorn"'))
    assert run(["rates", "--config", cfg], capsys)[0] == 2


def test_budget_exit(tmp_path, capsys):
    cfg = write(tmp_path / "r.toml", RATES.replace("reps = 6", "reps = 6\nbudget = 10"))
    code, _, err = run(["rates", "--config", cfg], capsys)
    assert code == 3 and "budget" in err


def test_tails(tmp_path, capsys):
    cfg = write(tmp_path / "t.toml", """
seed = 5
reps = 30
N = 40
x_grid = [0.0, 0.1, 50.0]
oracle_mode = "exact_1d"

[reference]
kind = "gaussian"
dim = 1

[envelope]
regime = "exp_strong"
alpha = 2.0
gamma = 1.0
""")
    code, out, _ = run(["tails", "--config", cfg, "--format", "json"], capsys)
    assert code == 0
    rows = json.loads(out)["rows"]
    assert rows[0]["empirical_prob"] == 1.0 and rows[-1]["empirical_prob"] == 0.0


def test_bounds(tmp_path, capsys):
    cfg = write(tmp_path / "b.toml", """
p = 1.0
d = 2

[bounds]
x_grid = [1.0]
lambda_grid = [10.0]

[envelope]
regime = "exp_strong"
alpha = 2.0
gamma = 1.0
""")
    code, out, _ = run(["bounds", "--config", cfg, "--format", "json"], capsys)
    assert code == 0
    rows = json.loads(out)["rows"]
    two = [r for r in rows if r["quantity"] == "poisson_two_sided"]
    assert two[0]["value"] == pytest.approx(0.0420121494194159, rel=1e-12)
    env = [r for r in rows if r["quantity"] == "envelope_a" and "x=0.1" in r["inputs"]]
    assert env[0]["value"] == pytest.approx(0.8505, abs=1e-4)


def test_bounds_defaults(capsys):
    code, out, _ = run(["bounds"], capsys)
    assert code == 0 and data_lines(out)[0] == "quantity,inputs,value"


def test_mkv(tmp_path, capsys):
    traj = tmp_path / "traj.csv"
    cfg = write(tmp_path / "m.toml", f"""
seed = 2
reps = 4
N_grid = [10, 20]
trajectory_out = "{traj}"
record_every = 50

[process]
kind = "mkv"
T = 0.5
dt = 0.01
""")
    code, out, _ = run(["mkv", "--config", cfg], capsys)
    assert code == 0 and len(data_lines(out)) == 3
    assert traj.read_text().startswith("step,particle,x0")


def test_mkv_instability_exit(tmp_path, capsys):
    cfg = write(tmp_path / "m.toml", """
seed = 2
reps = 1
N_grid = [5]

[process]
kind = "mkv"
beta = 1.0
dt = 3.0
T = 4500.0
x0 = 1.0
""")
    assert run(["mkv", "--config", cfg], capsys)[0] == 4
