import pytest

from sfpe.config import SCHEMA_VERSION, ConfigError, load, loads, require

MIN = """
schema_version = 1
[problem]
family = "brownian"
f = "v"
g = "norm2"
L = 1.0
[solver]
seed = 3
"""


def test_defaults_filled():
    cfg = loads(MIN)
    assert cfg["solver"]["n_paths"] == 10000 and cfg["solver"]["lambda"] == "auto"
    assert cfg["estimate"]["time_nodes"] == "gauss"
    assert cfg["output"]["csv"] == "solution.csv"
    assert SCHEMA_VERSION == 1


@pytest.mark.parametrize("text,key", [
    (MIN + "[solver.extra]\n", "solver.extra"),
    (MIN.replace('L = 1.0', 'L = "one"'), "problem.L"),
    (MIN + "[bogus]\nx = 1\n", "bogus"),
    (MIN.replace("schema_version = 1", "schema_version = 2"), "schema_version"),
    (MIN.replace("schema_version = 1", ""), "schema_version"),
    (MIN.replace("seed = 3", "seed = 3\nfrob = 1"), "solver.frob"),
    (MIN.replace("seed = 3", "seed = true"), "solver.seed"),
    ("schema_version = 1\n[solver]\nseed = 1\n", "problem"),
    (MIN + "[couple.other]\nfoo = 1\n", "couple.other.foo"),
])
def test_errors_name_key(text, key):
    with pytest.raises(ConfigError) as info:
        loads(text)
    assert str(info.value).startswith(key)


def test_syntax_error_has_position():
    with pytest.raises(ConfigError, match="line 3"):
        loads("schema_version = 1\n[problem]\nL = = 2\n")


def test_require():
    cfg = loads(MIN.replace("seed = 3", "n_paths = 5"))
    with pytest.raises(ConfigError, match="solver.seed"):
        require(cfg, "solver", "seed")
    assert require(cfg, "solver", "n_paths") == 5


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load(tmp_path / "absent.toml")


def test_shipped_configs_validate():
    import glob
    import os
    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    files = glob.glob(os.path.join(root, "*.toml"))
    assert files
    for f in files:
        load(f)
