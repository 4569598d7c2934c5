import csv
import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from microsim.cli import main
from microsim.integerise import METHODS, PROBABILISTIC
from microsim.ipf import WeightMatrix, read_weights_csv, write_weights_csv


def _rows(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _tree(root):
    root = Path(root)
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _inputs(root):
    root = Path(root)
    cons = sorted(str(p) for p in (root / "constraints").glob("*.csv"))
    # fit in the order the generator declares: age_sex, mode, tenure
    order = ["age_sex", "mode", "tenure"]
    cons = sorted(cons, key=lambda p: order.index(Path(p).stem))
    return ["--survey", str(root / "survey.csv"), "--map", str(root / "map.yaml"),
            "--constraints", *cons]


@pytest.fixture(scope="module")
def pipeline_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["pipeline", "--out", str(out), "--runs", "5"]) == 0
    return out


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen") / "inputs"
    assert main(["generate", "--out", str(out), "--spec-seed", "4"]) == 0
    return out


def test_pipeline_layout(pipeline_out):
    files = set(_tree(pipeline_out))
    for rel in ["manifest.json", "ipf/weights.csv", "ipf/trace.csv", "inputs/survey.csv",
                "evaluate/report.csv", "evaluate/report.json", "evaluate/popdiff.csv",
                "evaluate/plot.csv"]:
        assert Path(rel) in files
    for m in METHODS:
        assert Path(f"integerise/{m}/selections.csv") in files
        assert (Path(f"integerise/{m}/runs.csv") in files) == (m in PROBABILISTIC)
    assert not any(p.name.startswith(".") for p in pipeline_out.parent.iterdir())


def test_report_rows(pipeline_out):
    rows = _rows(pipeline_out / "evaluate" / "report.csv")
    overall = [r for r in rows if r["variable"] == "All"]
    assert [r["method"] for r in overall] == ["ipf", *METHODS]
    U_total = sum(float(r["census"]) for r in _rows(pipeline_out / "evaluate" / "plot.csv")
                  if r["method"] == "ipf")
    for r in overall:
        assert float(r["TAE"]) == pytest.approx(float(r["SAE_pct"]) * U_total / 100, abs=1e-9)


def test_plot_has_one_row_per_zone_category(pipeline_out):
    rows = _rows(pipeline_out / "evaluate" / "plot.csv")
    per_method = {}
    for r in rows:
        per_method[r["method"]] = per_method.get(r["method"], 0) + 1
    assert per_method == {m: 24 * 22 for m in ["ipf", *METHODS]}


def test_manifest(pipeline_out):
    man = json.loads((pipeline_out / "manifest.json").read_text())
    assert man["command"] == "pipeline"
    assert man["config"]["seed"] == 1000
    assert len(man["seeds"]["trs"]["run_seeds"]) == 5
    assert "timings_s" not in man
    assert set(man["versions"]) == {"microsim", "numpy", "python"}


def test_probabilistic_selections_are_exact(pipeline_out):
    for m in PROBABILISTIC:
        for r in _rows(pipeline_out / "integerise" / m / "summary.csv"):
            assert r["pop_sim"] == r["pop_cens"]


def test_rerun_byte_identical_and_threads(pipeline_out, tmp_path):
    out = tmp_path / "again"
    assert main(["pipeline", "--out", str(out), "--runs", "5", "--threads", "3"]) == 0
    assert _tree(out) == _tree(pipeline_out)


def test_seed_changes_only_probabilistic_outputs(pipeline_out, tmp_path):
    out = tmp_path / "seeded"
    assert main(["pipeline", "--out", str(out), "--runs", "5", "--seed", "7"]) == 0
    a, b = _tree(pipeline_out), _tree(out)
    assert set(a) == set(b)
    changed = {str(k) for k in a if a[k] != b[k]}
    assert changed
    for rel in changed:
        assert (rel == "manifest.json" or rel.startswith("evaluate/")
                or any(rel.startswith(f"integerise/{m}/") for m in PROBABILISTIC)), rel
    for m in ["rounding", "threshold", "counterweight"]:
        assert a[Path(f"integerise/{m}/selections.csv")] == b[Path(f"integerise/{m}/selections.csv")]
    ev_a = [r for r in _rows(pipeline_out / "evaluate/report.csv") if r["method"] not in PROBABILISTIC]
    ev_b = [r for r in _rows(out / "evaluate/report.csv") if r["method"] not in PROBABILISTIC]
    assert ev_a == ev_b


def test_timings_opt_in(tmp_path):
    out = tmp_path / "t"
    assert main(["pipeline", "--out", str(out), "--runs", "1", "--methods", "rounding",
                 "--timings"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["timings_s"]) == {"generate", "ipf", "integerise", "evaluate"}


def test_stagewise_commands(generated, tmp_path):
    inputs = _inputs(generated)
    assert main(["ipf", "--out", str(tmp_path / "ipf"), *inputs, "--binary"]) == 0
    wm = read_weights_csv(tmp_path / "ipf" / "weights.csv")
    assert wm.w.shape[1] == 24
    weights = str(tmp_path / "ipf" / "weights.mswm")
    assert main(["integerise", "--out", str(tmp_path / "int"), *inputs, "--weights", weights,
                 "--methods", "rounding,trs", "--runs", "3"]) == 0
    assert sorted(p.name for p in (tmp_path / "int").iterdir()) == ["manifest.json", "rounding", "trs"]
    assert main(["evaluate", "--out", str(tmp_path / "ev"), *inputs,
                 "--weights", str(tmp_path / "ipf" / "weights.csv"),
                 "--integerised", str(tmp_path / "int")]) == 0
    overall = [r["method"] for r in _rows(tmp_path / "ev" / "report.csv") if r["variable"] == "All"]
    assert overall == ["ipf", "rounding", "trs"]


def test_iterations_improve_fit(generated, tmp_path):
    inputs = _inputs(generated)
    finals = {}
    for it in (1, 20):
        out = tmp_path / f"ipf{it}"
        assert main(["ipf", "--out", str(out), *inputs, "--iterations", str(it)]) == 0
        rows = _rows(out / "trace.csv")
        assert int(rows[-1]["iteration"]) == it
        finals[it] = float(rows[-1]["tae"])
    assert finals[20] <= finals[1]


def test_rounding_integer_weights_reproduced(generated, tmp_path):
    inputs = _inputs(generated)
    assert main(["ipf", "--out", str(tmp_path / "ipf"), *inputs]) == 0
    wm = read_weights_csv(tmp_path / "ipf" / "weights.csv")
    w = np.random.default_rng(0).integers(0, 4, size=wm.w.shape).astype(float)
    path = write_weights_csv(WeightMatrix(w, wm.zones), tmp_path / "int_weights.csv")
    assert main(["integerise", "--out", str(tmp_path / "int"), *inputs, "--weights", str(path),
                 "--methods", "rounding"]) == 0
    got = np.zeros_like(w)
    zones = {z: j for j, z in enumerate(wm.zones)}
    for r in _rows(tmp_path / "int" / "rounding" / "selections.csv"):
        got[int(r["individual_id"]), zones[r["zone"]]] += int(r["copies"])
    np.testing.assert_array_equal(got, w)


def test_config_file_and_flag_override(generated, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("iterations: 2\nmethods: [rounding]\nspec-seed: 4\n")
    out = tmp_path / "c"
    assert main(["pipeline", "--config", str(cfg), "--out", str(out), "--iterations", "3"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["iterations"] == 3
    assert man["config"]["methods"] == ["rounding"]
    assert int(_rows(out / "ipf" / "trace.csv")[-1]["iteration"]) == 3
    # same inputs as the generate fixture
    assert filecmp.cmp(out / "inputs" / "survey.csv", generated / "survey.csv", shallow=False)


def test_missing_constraint_file(generated, tmp_path, capsys):
    missing = tmp_path / "nowhere.csv"
    args = ["ipf", "--out", str(tmp_path / "x"), "--survey", str(generated / "survey.csv"),
            "--map", str(generated / "map.yaml"), "--constraints", str(missing)]
    assert main(args) == 2
    assert str(missing) in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


@pytest.mark.parametrize("argv", [
    ["pipeline", "--methods", "nearest"],
    ["pipeline", "--iterations", "0"],
    ["pipeline", "--runs", "0"],
    ["ipf"],
])
def test_input_errors_exit_2(argv, tmp_path):
    assert main([*argv, "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("iteratoins: 2\n")
    assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_model_error_exit_1_leaves_no_output(generated, tmp_path, capsys):
    inputs = _inputs(generated)
    assert main(["ipf", "--out", str(tmp_path / "ipf"), *inputs]) == 0
    wm = read_weights_csv(tmp_path / "ipf" / "weights.csv")
    path = write_weights_csv(WeightMatrix(np.zeros_like(wm.w), wm.zones), tmp_path / "zero.csv")
    out = tmp_path / "int"
    assert main(["integerise", "--out", str(out), *inputs, "--weights", str(path),
                 "--methods", "threshold"]) == 1
    assert "Z001" in capsys.readouterr().err
    assert not out.exists()
    assert not any(p.name.startswith(".int") for p in tmp_path.iterdir())
