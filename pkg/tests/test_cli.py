import csv

import pytest

from odohmm.cli import EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_OK, ExperimentPlan, main
from odohmm.model import load_model, validate_model

from cli_pipeline import rerun_differences, run_pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    return out, run_pipeline(out)


def test_every_command_succeeds(pipeline):
    _, codes = pipeline
    assert all(code == EXIT_OK for code in codes.values()), codes


def test_learned_models_are_valid(pipeline):
    out, _ = pipeline
    for name in ("tag", "kmeans", "random"):
        m = load_model(out / f"learned_{name}.model")
        assert validate_model(m).ok
    rel = load_model(out / "learned_rel.model")
    assert rel.coordinate_regime.value == "relative"
    assert rel.constraint_regime.value == "additive"
    assert validate_model(rel).ok


def test_experiment_outputs(pipeline):
    out, _ = pipeline
    exp = out / "exp"
    rows = list(csv.DictReader(open(exp / "runs.csv")))
    assert len(rows) == 2 * 2 * 2  # settings x prefixes x restarts
    assert {r["setting"] for r in rows} == {"odo", "plain"}
    summary = list(csv.DictReader(open(exp / "summary.csv")))
    assert {int(r["length"]) for r in summary} == {40, 80}
    tests = list(csv.DictReader(open(exp / "ttest.csv")))
    assert all(t["odometry_setting"] == "odo" for t in tests)
    assert (exp / "timing.csv").exists()
    assert list(exp.glob("map_odo_seq0_len80.svg"))


def test_trace_and_kl_files(pipeline):
    out, _ = pipeline
    header = (out / "trace_tag.csv").read_text().splitlines()[0]
    assert "wall_ms" not in header
    kl = list(csv.DictReader(open(out / "kl.csv")))
    assert float(kl[0]["d_nats"]) >= -1.0
    assert (out / "map.dot").read_text().startswith("digraph")


def test_rerun_is_byte_identical(tmp_path):
    first, second, diff = rerun_differences(tmp_path / "run", tmp_path / "snapshot")
    assert first == second
    assert diff == []


def test_input_errors_exit_two(tmp_path):
    assert main(["learn", "--sequence", str(tmp_path / "missing.txt"), "--states", "3",
                 "--out", str(tmp_path / "m")]) == EXIT_INPUT
    (tmp_path / "bad.model").write_text("garbage\n")
    assert main(["map", "export", "--model", str(tmp_path / "bad.model"),
                 "--out", str(tmp_path / "map")]) == EXIT_INPUT
    assert main(["env", "build", "--canned", "NOWHERE", "--out", str(tmp_path / "x")]) == EXIT_INPUT


def test_overflow_exits_two_and_strict_exits_three(tmp_path):
    assert main(["env", "build", "--canned", "LOOP-17", "--out", str(tmp_path / "t.model")]) == 0
    assert main(["sim", "sample", "--model", str(tmp_path / "t.model"), "--length", "120",
                 "--out", str(tmp_path / "s.txt")]) == 0
    assert main(["learn", "--sequence", str(tmp_path / "s.txt"), "--states", "5",
                 "--out", str(tmp_path / "m")]) == EXIT_INPUT
    code = main(["learn", "--sequence", str(tmp_path / "s.txt"), "--states", "17", "--init",
                 "random", "--max-iters", "2", "--strict", "--out", str(tmp_path / "m")])
    assert code == EXIT_NOT_CONVERGED


def test_plan_validation(tmp_path):
    from odohmm.model import InputError
    with pytest.raises(InputError):
        ExperimentPlan(environment="LOOP-17", output_dir="x", sequence_length=10,
                       sequence_seeds=[1], settings=[{"name": "a", "init": "magic"}])
    with pytest.raises(InputError):
        ExperimentPlan(environment="LOOP-17", output_dir="x", sequence_length=10,
                       sequence_seeds=[1], settings=[{"name": "a"}], prefixes=[50])
    (tmp_path / "p.json").write_text('{"environment": "LOOP-17", "bogus": 1}')
    assert main(["exp", "run", "--plan", str(tmp_path / "p.json")]) == EXIT_INPUT
