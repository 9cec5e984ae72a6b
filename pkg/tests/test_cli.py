import csv
import hashlib
import io
import json
import subprocess
import sys

import pytest

from fraclab import __version__
from fraclab.cli import COMMANDS, DEFAULTS, EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main, run

# small configurations so that every command runs in about a second
SMALL = {
    "constants": {"domains": [{"kind": "box", "dim": 1, "side": 1.0, "h": 0.0625}], "s": [0.5], "p": [2.0]},
    "counterexample": {"n_list": [0, 1], "h": 0.125},
    "kprofile": {"t": {"t_min": 0.01, "t_max": 1.0, "n": 9}},
    "capacity": {},
    "hardy": {"alpha": [1.0], "p": [2.0], "deltas": [1e-2, 1e-4]},
    "geometry": {"n_polygons": 3, "t": [0.2, 0.8]},
    "slimits": {"s": [0.05, 0.5, 0.95]},
}


def _write(tmp_path, name, cfg):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def _table(text):
    body = [line for line in text.splitlines() if not line.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(body))))


def _header(text):
    return [line for line in text.splitlines() if line.startswith("#")]


@pytest.fixture(scope="module")
def outputs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cfg")
    out = {}
    for name in COMMANDS:
        path = _write(tmp, name, SMALL[name])
        out[name] = (path, run(name, path, seed=7))
    return out


@pytest.mark.parametrize("name", sorted(COMMANDS))
def test_every_command_succeeds(outputs, name):
    _, (text, status) = outputs[name]
    assert status == EXIT_OK
    assert text.endswith("\n")


@pytest.mark.parametrize("name", sorted(COMMANDS))
def test_rerun_is_byte_identical(outputs, name):
    path, (text, _) = outputs[name]
    assert run(name, path, seed=7)[0] == text


@pytest.mark.parametrize("name", ["constants", "capacity", "slimits", "kprofile"])
def test_thread_count_does_not_change_output(outputs, name):
    path, (text, _) = outputs[name]
    assert run(name, path, seed=7, threads=3)[0] == text


@pytest.mark.parametrize("name", sorted(set(COMMANDS) - {"capacity"}))
def test_csv_header_block(outputs, name):
    _, (text, _) = outputs[name]
    head = _header(text)
    assert head[0] == f"# fraclab {__version__} {name}"
    canon = head[2].removeprefix("# config: ")
    assert head[1] == "# config_sha256: " + hashlib.sha256(canon.encode()).hexdigest()
    cfg = json.loads(canon)
    assert cfg["seed"] == 7
    assert any(line.startswith("# tolerances:") for line in head)
    assert any(line.startswith("# truncation_boxes:") for line in head)


def test_capacity_json_document(outputs):
    _, (text, _) = outputs["capacity"]
    doc = json.loads(text)
    assert doc["seed"] == 7 and doc["fraclab_version"] == __version__
    canon = json.dumps(doc["config"], sort_keys=True, separators=(",", ":"))
    assert doc["config_sha256"] == hashlib.sha256(canon.encode()).hexdigest()
    assert doc["result"]["value"] > 0


def test_constants_unit_interval_row(outputs):
    _, (text, _) = outputs["constants"]
    (row,) = _table(text)
    assert float(row["residual_oneside"]) >= 0
    assert row["oneside_ok"] == "true"


def test_counterexample_rows(outputs):
    _, (text, _) = outputs["counterexample"]
    rows = _table(text)
    assert [int(r["n"]) for r in rows] == [0, 1]
    assert float(rows[1]["lambdaS"]) < float(rows[0]["lambdaS"])
    for r in rows:
        assert float(r["lambdaS_dilated_cell"]) == pytest.approx(float(r["lambdaS_scaled_cell"]), rel=1e-10)


def test_geometry_cone_row(outputs):
    _, (text, _) = outputs["geometry"]
    rows = _table(text)
    cone = [r for r in rows if r["id"] == "beta=0.0"][0]
    assert float(cone["eccentricity"]) == 2.0
    assert len([r for r in rows if r["kind"] == "polygon"]) == 3 * 2


def test_slimits_rows(outputs):
    _, (text, _) = outputs["slimits"]
    rows = {float(r["s"]): r for r in _table(text)}
    assert 0.95 in rows and float(rows[0.95]["one_minus_s_weighted"]) > 0
    small = rows[0.05]
    # reported only: s [u]^p is comparable with beta ||u||^p for small s
    assert float(small["s_weighted"]) > 0 and float(small["beta_lp"]) > 0


def test_zero_function_outputs(tmp_path):
    path = _write(tmp_path, "k", {"function": {"kind": "zero"}, "t": [0.1, 1.0, 10.0]})
    text, status = run("kprofile", path, seed=1)
    assert status == EXIT_OK
    assert all(float(r["K"]) == 0.0 for r in _table(text))
    path = _write(tmp_path, "s", {"function": {"kind": "zero"}})
    text, status = run("slimits", path, seed=1)
    assert all(float(r["seminorm_p"]) == 0.0 and float(r["beta_lp"]) == 0.0 for r in _table(text))


def test_capacity_empty_target_and_minimizer_dump(tmp_path):
    dump = tmp_path / "u.csv"
    path = _write(tmp_path, "c", {"F": [], "minimizer_csv": str(dump)})
    text, status = run("capacity", path, seed=1)
    assert status == EXIT_OK
    assert json.loads(text)["result"]["value"] == 0.0
    rows = _table(dump.read_text())
    assert rows and all(float(r["u"]) == 0.0 for r in rows)


def test_kprofile_random_function_depends_on_seed(tmp_path):
    path = _write(tmp_path, "k", {"function": {"kind": "random"}, "t": [0.01, 0.1]})
    a, b = run("kprofile", path, seed=1)[0], run("kprofile", path, seed=2)[0]
    assert _table(a) != _table(b)


@pytest.mark.parametrize("cfg,command", [
    ({"s": []}, "constants"),
    ({"s": [1.5]}, "constants"),
    ({"s": 0.6}, "counterexample"),
    ({"bogus": 1}, "hardy"),
    ({"kind": "other"}, "capacity"),
    ({"betas": [1.0]}, "geometry"),
    ({"function": {"kind": "nope"}}, "kprofile"),
])
def test_invalid_configs_exit_2(tmp_path, capsys, cfg, command):
    path = _write(tmp_path, "bad", cfg)
    assert main([command, "--config", path, "--seed", "1"]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_seed_is_mandatory(capsys):
    assert main(["hardy"]) == EXIT_CONFIG
    assert "seed" in capsys.readouterr().err
    assert main(["hardy", "--seed", "-3"]) == EXIT_CONFIG
    assert main(["hardy", "--seed", "1", "--threads", "0"]) == EXIT_CONFIG


def test_seed_from_config(tmp_path, capsys):
    path = _write(tmp_path, "h", {**SMALL["hardy"], "seed": 11})
    assert main(["hardy", "--config", path]) == EXIT_OK
    assert "# seed: 11" in capsys.readouterr().out


def test_failed_inequality_exit_1(tmp_path):
    # a negative slack asks for more than the inequality gives
    path = _write(tmp_path, "c", {**SMALL["constants"], "slack": -10.0})
    text, status = run("constants", path, seed=1)
    assert status == EXIT_FAIL
    assert _table(text)[0]["oneside_ok"] == "false"


def test_out_file_and_module_entry(tmp_path):
    path = _write(tmp_path, "g", SMALL["geometry"])
    out = tmp_path / "g.csv"
    assert main(["geometry", "--config", path, "--seed", "5", "--out", str(out)]) == EXIT_OK
    proc = subprocess.run([sys.executable, "-m", "fraclab", "geometry", "--config", path, "--seed", "5"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout == out.read_text()


def test_defaults_cover_every_command():
    assert set(DEFAULTS) == set(COMMANDS)
