import json
import math
import os

import pytest

from sfpe.cli import main

HEAT = """
schema_version = 1
[problem]
family = "brownian"
f = "0"
g = "norm2"
L = 1.0
[solver]
seed = 5
n_paths = 500
M = 10
K = 4
knots = 9
lo = -2.0
hi = 2.0
"""

LINEAR = HEAT.replace('f = "0"', 'f = "v"')

DET = """
schema_version = 1
[problem]
drift = ["0"]
diffusion = ["0"]
f = "v"
g = "1"
L = 1.0
[lyapunov]
expression = "1"
rho = 0.0
[solver]
seed = 1
n_paths = 1
M = 50
K = 10
knots = 3
lo = -1.0
hi = 1.0
tol = 1e-9
residual = false
[estimate]
depth = 4
widths = [1, 2]
"""


def run(tmp_path, text, *args):
    cfg = tmp_path / "run.toml"
    cfg.write_text(text)
    return main([args[0], "--config", str(cfg), "--out", str(tmp_path / "out"), *args[1:]])


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_version(capsys):
    assert main(["version"]) == 0
    assert "backend" in capsys.readouterr().out


def test_solve_heat_writes_outputs(tmp_path, capsys):
    assert run(tmp_path, HEAT, "solve") == 0
    out = last_json(capsys)
    assert out["converged"] and out["iterations"] == 2
    csv = (tmp_path / "out" / "solution.csv").read_text().splitlines()
    assert csv[0] == "t,x1,u" and len(csv) == 1 + 5 * 9
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["report"]["converged"] and report["report"]["iterations"][1]["shortcut"]
    assert "timestamp" in report["meta"]


def test_solve_reproducible_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    assert run(a, LINEAR, "solve", "--threads", "1") == 0
    assert run(b, LINEAR, "solve", "--threads", "3") == 0
    for name in ("solution.csv",):
        assert (a / "out" / name).read_bytes() == (b / "out" / name).read_bytes()
    ra = (a / "out" / "report.json").read_text().splitlines()
    rb = (b / "out" / "report.json").read_text().splitlines()
    # only the first line (meta: timestamp, wall time) may differ
    assert ra[1:] == rb[1:]


def test_solve_linear_iteration_budget(tmp_path, capsys):
    assert run(tmp_path, LINEAR, "solve") == 0
    out = last_json(capsys)
    rep = json.loads((tmp_path / "out" / "report.json").read_text())["report"]
    d1 = rep["iterations"][0]["delta"]
    assert out["iterations"] <= math.ceil(math.log(d1 / 1e-3) / math.log(2)) + 1


def test_seed_flag_overrides(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    run(a, HEAT, "solve")
    run(b, HEAT, "solve", "--seed", "6")
    assert (a / "out" / "solution.csv").read_bytes() != (b / "out" / "solution.csv").read_bytes()


def test_solve_max_iter_exit_2(tmp_path):
    text = LINEAR.replace("hi = 2.0", "hi = 2.0\ntol = 1e-12\nmax_iter = 2\nresidual = false")
    assert run(tmp_path, text, "solve") == 2


@pytest.mark.parametrize("text,needle", [
    (HEAT.replace("seed = 5", ""), "solver.seed"),
    (HEAT.replace("L = 1.0", ""), "problem.L"),
    (HEAT.replace("K = 4", "K = 4\nbogus = 1"), "solver.bogus"),
    (HEAT.replace("[problem]", "[problem]\nx ="), "syntax"),
    (HEAT.replace('g = "norm2"', 'g = "norm2 +"'), "problem.g"),
])
def test_config_errors_exit_1(tmp_path, capsys, text, needle):
    assert run(tmp_path, text, "solve") == 1
    assert needle in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["solve", "--config", str(tmp_path / "nope.toml")]) == 1


def test_usage_error_exit_1(capsys):
    with pytest.raises(SystemExit) as info:
        main(["solve"])
    assert info.value.code == 1


def test_estimate_depths(tmp_path, capsys):
    assert run(tmp_path, DET, "estimate") == 0
    assert last_json(capsys)["estimate"] == pytest.approx(2.708333333333333, rel=1e-15)
    assert run(tmp_path, DET, "estimate", "--depth", "0") == 0
    assert last_json(capsys)["estimate"] == 0.0
    assert run(tmp_path, DET, "estimate", "--depth", "1", "--widths", "1,2;1,1") == 0
    out = last_json(capsys)
    assert out["widths"] == [[1, 2], [1, 1]] and out["estimate"] == pytest.approx(2.0)


def test_estimate_work_cap(tmp_path, capsys):
    text = HEAT.replace('f = "0"', 'f = "v"') + "[estimate]\ndepth = 3\nwidths = [1000, 10]\nmax_work = 1000\n"
    assert run(tmp_path, text, "estimate") == 1
    assert "cap" in capsys.readouterr().err


def test_deterministic_solve(tmp_path, capsys):
    assert run(tmp_path, DET, "solve") == 0
    csv = (tmp_path / "out" / "solution.csv").read_text().splitlines()
    u0 = float(csv[1].split(",")[-1])
    # left quadrature bias ~ dt * e, plus interpolation in time
    assert abs(u0 - math.e) <= (1 / 50) * math.e + 1e-3


CHECK = """
schema_version = 1
[problem]
family = "brownian"
f = "0"
g = "0"
L = 1.0
[solver]
seed = 3
[check]
n_points = 2000
n = 20000
M = 50
points = [{ t = 0.0, x = 0.0, s = 1.0 }, { t = 0.5, x = 2.0, s = 1.0 }]
"""


def test_check_lyapunov_pass(tmp_path, capsys):
    assert run(tmp_path, CHECK + "[lyapunov]\np = 2.0\nc = 1.0\n", "check-lyapunov") == 0
    out = last_json(capsys)
    assert out["passed"] and not out["generator"]["violation"]
    assert all(s["margin"] > 0 for s in out["supermartingale"])


def test_check_lyapunov_untilted_fails(tmp_path, capsys):
    text = CHECK + '[lyapunov]\nexpression = "(1 + norm2)"\nrho = 0.0\n'
    assert run(tmp_path, text, "check-lyapunov") == 3
    out = last_json(capsys)
    assert out["generator"]["violation"] and not out["supermartingale"][0]["passed"]


def test_check_lyapunov_nonpositive(tmp_path, capsys):
    text = CHECK + '[lyapunov]\nexpression = "1 - norm2"\nrho = 1.0\n'
    assert run(tmp_path, text, "check-lyapunov") == 1
    assert "not positive" in capsys.readouterr().err


def test_verify_contraction(tmp_path, capsys):
    # large lambda needs many time knots; this coarse grid only sweeps 2L and 4L
    text = LINEAR.replace("n_paths = 500", "n_paths = 2000").replace("M = 10", "M = 30")
    assert run(tmp_path, text, "verify-contraction", "--lambda-sweep", "2,4") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "lambda,measured,bound"
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    assert [r[0] for r in rows] == [2.0, 4.0] and [r[2] for r in rows] == [0.5, 0.25]
    assert rows[0][1] < 0.6
    assert (tmp_path / "out" / "contraction.csv").exists()


def test_verify_contraction_fails_above_envelope(tmp_path, capsys):
    # on a 4-interval time grid the lambda = 20 ratio sits far above L / lambda
    text = LINEAR.replace("n_paths = 500", "n_paths = 2000").replace("M = 10", "M = 30")
    assert run(tmp_path, text, "verify-contraction", "--lambda-sweep", "20") == 3


def test_verify_contraction_v_free_is_zero(tmp_path, capsys):
    text = HEAT.replace('f = "0"', 'f = "x1"')
    assert run(tmp_path, text, "verify-contraction", "--lambda-sweep", "2,4") == 0
    rows = capsys.readouterr().out.strip().splitlines()[1:]
    assert all(float(r.split(",")[1]) == 0.0 for r in rows)


COUPLE = """
schema_version = 1
[problem]
drift = ["-x1 + max(0, norm2 - 4)"]
diffusion = ["1"]
f = "0"
g = "0"
L = 1.0
[solver]
seed = 11
[couple]
radius = 2.0
M = 1000
n = 1000
"""


def test_couple_local(tmp_path, capsys):
    text = COUPLE + '[couple.other]\ndrift = ["-x1"]\n'
    assert run(tmp_path, text, "couple-test") == 0
    assert last_json(capsys)["coupling"]["max_diff_inside"] == 0.0


def test_couple_identical(tmp_path, capsys):
    assert run(tmp_path, COUPLE, "couple-test") == 0
    assert last_json(capsys)["coupling"]["max_diff_inside"] == 0.0


def test_couple_differs_at_origin(tmp_path, capsys):
    text = COUPLE + '[couple.other]\ndrift = ["-x1 + 0.5"]\n'
    assert run(tmp_path, text, "couple-test") == 3
    out = last_json(capsys)
    assert out["coupling"]["first_divergence"]["step"] == 1


def test_couple_freeze_and_dump(tmp_path, capsys):
    text = COUPLE.replace("radius = 2.0", "radius = 2.0\nfreeze_x0 = 3.0").replace(
        '"-x1 + max(0, norm2 - 4)"', '"x1 * max(0, 1 - norm2)"').replace('diffusion = ["1"]', 'diffusion = ["max(0, 1 - norm2)"]')
    dump = tmp_path / "paths.csv"
    assert run(tmp_path, text, "couple-test", "--dump-paths", str(dump)) == 0
    assert last_json(capsys)["freeze"]["exact"]
    assert dump.read_text().startswith("path,step,t,x1")


def test_threads_env_fallback(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SFPE_THREADS", "2")
    assert run(tmp_path, HEAT, "solve") == 0
    monkeypatch.setenv("SFPE_THREADS", "0")
    assert run(tmp_path, HEAT, "solve") == 1


def test_shipped_heat_config_runs(tmp_path, capsys):
    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    assert main(["estimate", "--config", os.path.join(root, "deterministic.toml"), "--out", str(tmp_path)]) == 0
    assert last_json(capsys)["estimate"] == pytest.approx(2.708333333333333, rel=1e-15)
