import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from gwmerge.cli import compare_reports, main
from gwmerge.config import apply_overrides, load_config, parse_config, write_config
from gwmerge.errors import ConfigError, DegenerateRange, StageError, TargetOutOfRange
from gwmerge.merger import read_bundle
from gwmerge.pipeline import run_digest, run_pipeline
from gwmerge.synthetic import FixtureSpec, ground_truth, write_fixture
from gwmerge.tensor_io import SquareMatrix, read_plan, read_snapshot, read_square_matrix, write_square_matrix

GOLDEN = Path(__file__).parent / "golden" / "pipeline_golden.json"
SMALL = FixtureSpec(n_tasks=4, n_points=12, dim=6, hidden=4, n_labels=3, n_eval=10, target_clusters=2, seed=3)


@pytest.fixture(scope="module")
def fixture_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("fixture")
    cfg = load_config(write_fixture(root, FixtureSpec()))
    report = run_pipeline(cfg)
    return root, cfg, report


@pytest.fixture
def small(tmp_path):
    return load_config(write_fixture(tmp_path, SMALL)), tmp_path


# ------------------------------------------------------------------ config


def test_init_config_round_trip(tmp_path):
    path = write_fixture(tmp_path, SMALL)
    cfg = load_config(path)
    again = tmp_path / "again.toml"
    write_config(cfg, again)
    assert load_config(again) == cfg


def test_missing_snapshot_names_task(small):
    cfg, root = small
    (root / "snapshots" / "task3.gwm").unlink()
    with pytest.raises(ConfigError, match="task3"):
        load_config(root / "config.toml")


def test_parse_error_names_key_and_line(tmp_path):
    text = 'seed = 0\n\n[planner]\ntarget_clusters = "two"\n'
    with pytest.raises(ConfigError, match=r"planner\.target_clusters.*line 4"):
        parse_config(text, tmp_path, check_paths=False)
    with pytest.raises(ConfigError, match=r"bogus.*line 2"):
        parse_config("seed = 0\nbogus = 1\n", tmp_path, check_paths=False)
    with pytest.raises(ConfigError, match=r"merger\.method.*required"):
        parse_config("seed = 0\n[merger]\ndensity = 0.5\n", tmp_path, check_paths=False)


def test_duplicate_ids(small):
    cfg, _ = small
    dup = replace(cfg, tasks=(cfg.tasks[0], cfg.tasks[0], *cfg.tasks[2:]))
    with pytest.raises(ConfigError, match="duplicate"):
        apply_overrides(dup)


def test_target_zero_is_planner_error(small):
    cfg, _ = small
    with pytest.raises(StageError) as info:
        apply_overrides(cfg, target=0)
    assert info.value.stage == "planner" and isinstance(info.value.cause, TargetOutOfRange)


def test_ties_needs_base(small):
    cfg, _ = small
    with pytest.raises(ConfigError, match="base_snapshot"):
        apply_overrides(replace(cfg, base_snapshot=None), merge_method="ties")


def test_overrides_apply(small):
    cfg, _ = small
    out = apply_overrides(cfg, epsilon=0.5, gw_p=3.0, max_iter=7, subsample=0, seed=9, target=3, lam=0.2)
    assert out.distance.gw.epsilon == 0.5 and out.distance.gw.p == 3.0 and out.distance.gw.max_outer_iter == 7
    assert out.distance.subsample is None and out.seed == 9 and out.distance.gw.seed == 9
    assert out.planner.target_clusters == 3 and out.planner.lam == 0.2


# ---------------------------------------------------------------- pipeline


def test_pipeline_outputs_and_report(fixture_run):
    root, cfg, report = fixture_run
    out = cfg.output_dir
    for name in ("distances.csv", "similarity.csv", "plan.json", "bundle/bundle.json", "report.json", "metrics.json"):
        assert (out / name).is_file()
    assert report["status"] == "ok"
    assert [s["name"] for s in report["stages"]] == ["embeddings", "distances", "similarity", "planner", "merge", "eval"]
    assert all(s["seconds"] >= 0 for s in report["stages"])
    assert len(report["gw"]["pairs"]) == 36
    assert report["plan"]["clusters"] == ground_truth(9)
    assert report["merge"]["storage_reduction_ratio"] == 3.0


def test_pipeline_matches_golden(fixture_run):
    _, cfg, _ = fixture_run
    golden = json.loads(GOLDEN.read_text())
    got = run_digest(cfg.output_dir)
    assert got["plan"] == golden["plan"]
    assert got["storage_reduction_ratio"] == golden["storage_reduction_ratio"]
    assert got["loss"] == pytest.approx(golden["loss"], abs=1e-9)
    np.testing.assert_allclose(got["distances"], golden["distances"], rtol=0, atol=1e-9)
    np.testing.assert_allclose(got["similarity"], golden["similarity"], rtol=0, atol=1e-9)
    assert got["weighted_metrics"] == pytest.approx(golden["weighted_metrics"], abs=1e-12)
    # bundle payloads come from averaging fixed float32 snapshots, independent of the GW stage
    bundle_hashes = {k: v for k, v in got["sha256"].items() if k.startswith("bundle/")}
    assert bundle_hashes == {k: v for k, v in golden["sha256"].items() if k.startswith("bundle/")}


def test_two_identical_tasks_target_one(tmp_path):
    cfg = load_config(write_fixture(tmp_path, replace(SMALL, n_tasks=2, target_clusters=1)))
    twin = replace(cfg.tasks[1], embeddings=cfg.tasks[0].embeddings, snapshot=cfg.tasks[0].snapshot)
    cfg = replace(cfg, tasks=(cfg.tasks[0], twin))
    with pytest.warns(DegenerateRange):  # a single pair always spans an empty range
        report = run_pipeline(cfg)
    assert report["similarity"]["degenerate"]
    assert report["plan"]["clusters"] == [[1, 2]]
    assert report["merge"]["storage_reduction_ratio"] == 2.0
    assert read_square_matrix(cfg.output_dir / "distances.csv").data[0, 1] < 1e-3


def test_nine_tasks_target_five_ratio(fixture_run, tmp_path):
    _, cfg, _ = fixture_run
    report = run_pipeline(apply_overrides(cfg, target=5, output_dir=tmp_path / "t5"))
    assert len(report["plan"]["clusters"]) == 5
    assert report["merge"]["storage_reduction_ratio"] == 9 / 5


def test_failure_is_stage_tagged_and_partial_outputs_kept(small):
    cfg, root = small
    (root / "snapshots" / "task2.gwm").write_bytes(b"GWM1 broken")
    with pytest.raises(StageError) as info:
        run_pipeline(cfg)
    assert info.value.stage == "merge"
    report = json.loads((cfg.output_dir / "report.json").read_text())
    assert report["status"] == "FAILED" and report["failed_stage"] == "merge"
    assert (cfg.output_dir / "plan.json").is_file() and (cfg.output_dir / "similarity.csv").is_file()


@pytest.mark.parametrize("method", ["fisher", "task_arithmetic", "ties"])
def test_pipeline_merge_methods(small, method):
    cfg, _ = small
    report = run_pipeline(apply_overrides(cfg, merge_method=method, planner_method="greedy"))
    assert report["merge"]["method"] == method
    assert report["merge"]["storage_reduction_ratio"] == 2.0


def test_workers_do_not_change_outputs(small, tmp_path):
    cfg, _ = small
    a = run_pipeline(apply_overrides(cfg, output_dir=tmp_path / "a"))
    b = run_pipeline(apply_overrides(cfg, workers=3, output_dir=tmp_path / "b"))
    assert a["plan"] == b["plan"]
    assert (tmp_path / "a" / "distances.csv").read_bytes() == (tmp_path / "b" / "distances.csv").read_bytes()


# --------------------------------------------------------------------- CLI


def test_cli_validate_and_run(small, capsys):
    cfg, root = small
    assert main(["validate", str(root / "config.toml")]) == 0
    assert main(["run", str(root / "config.toml"), "--out", str(root / "cli_run")]) == 0
    assert (root / "cli_run" / "report.json").is_file()


def test_cli_target_zero_exit_code(small, capsys):
    _, root = small
    assert main(["run", str(root / "config.toml"), "--target", "0"]) != 0
    err = capsys.readouterr().err
    assert "[planner]" in err and "TargetOutOfRange" in err


def test_cli_stage_isolation(small, capsys):
    cfg, root = small
    run_pipeline(cfg)
    run = cfg.output_dir
    assert main(["gw-dist", "--config", str(root / "config.toml"), "--out", str(root / "d.csv")]) == 0
    assert (root / "d.csv").read_bytes() == (run / "distances.csv").read_bytes()
    assert main(["similarity", "--distances", str(root / "d.csv"), "--out", str(root / "s.csv")]) == 0
    assert (root / "s.csv").read_bytes() == (run / "similarity.csv").read_bytes()
    args = ["plan", "--similarity", str(root / "s.csv"), "--target", str(cfg.planner.target_clusters),
            "--method", cfg.planner.method, "--out", str(root / "p.json")]
    assert main(args) == 0
    assert (root / "p.json").read_bytes() == (run / "plan.json").read_bytes()
    assert main(["merge", "--plan", str(root / "p.json"), "--snapshots", str(root / "snapshots"),
                 "--method", "average", "--out", str(root / "b")]) == 0
    for f in (run / "bundle").iterdir():
        assert (root / "b" / f.name).read_bytes() == f.read_bytes()


def test_cli_plan_on_hand_edited_similarity(tmp_path, capsys):
    S = np.full((4, 4), 0.1)
    S[0, 1] = S[1, 0] = 0.9
    S[2, 3] = S[3, 2] = 0.8
    np.fill_diagonal(S, 1.0)
    write_square_matrix(SquareMatrix(S, ("a", "b", "c", "d")), tmp_path / "s.csv")
    assert main(["plan", "--similarity", str(tmp_path / "s.csv"), "--target", "2", "--out", str(tmp_path / "p.json")]) == 0
    assert read_plan(tmp_path / "p.json").clusters == [[1, 2], [3, 4]]


def test_cli_merge_fisher_and_ties(small, capsys):
    cfg, root = small
    run_pipeline(cfg)
    plan = str(cfg.output_dir / "plan.json")
    assert main(["merge", "--plan", plan, "--snapshots", str(root / "snapshots"), "--method", "fisher",
                 "--fishers", str(root / "fisher"), "--out", str(root / "bf")]) == 0
    assert main(["merge", "--plan", plan, "--snapshots", str(root / "snapshots"), "--method", "ties",
                 "--base", str(root / "base.gwm"), "--density", "0.5", "--out", str(root / "bt")]) == 0
    bundle = read_bundle(root / "bt")
    assert bundle.method == "ties" and bundle.method_params["density"] == 0.5
    for t in range(1, SMALL.n_tasks + 1):
        src = read_snapshot(root / "snapshots" / f"task{t}.gwm")
        for n, a in src.head.items():
            np.testing.assert_array_equal(bundle.heads[t][n], a)
    assert main(["merge", "--plan", plan, "--snapshots", str(root / "snapshots"), "--method", "ties",
                 "--out", str(root / "bx")]) == 1
    assert "MethodRequiresBase" in capsys.readouterr().err


def test_cli_eval_and_compare(small, capsys):
    _, root = small
    assert main(["eval", "--pred", str(root / "predictions"), "--report", str(root / "e.json")]) == 0
    doc = json.loads((root / "e.json").read_text())
    assert set(doc["per_task"]) == {f"task{t}" for t in range(1, SMALL.n_tasks + 1)}
    after = json.loads(json.dumps(doc))
    for i, t in enumerate(sorted(after["per_task"])):
        after["per_task"][t]["micro_f1"] += 0.01 * (i + 1)
    (root / "after.json").write_text(json.dumps(after))
    assert main(["compare", "--before", str(root / "e.json"), "--after", str(root / "after.json"),
                 "--out", str(root / "cmp.json")]) == 0
    cmp = json.loads((root / "cmp.json").read_text())
    assert cmp["tests"]["micro_f1"]["df"] == SMALL.n_tasks - 1
    assert cmp["tests"]["macro_f1"]["zero_variance"]
    assert compare_reports(doc, after)["tests"]["micro_f1"]["p_value"] < 1


def test_cli_init(tmp_path, capsys):
    assert main(["init", str(tmp_path / "fx"), "--tasks", "4", "--points", "10", "--target", "2"]) == 0
    cfg = load_config(tmp_path / "fx" / "config.toml")
    assert len(cfg.tasks) == 4 and cfg.planner.target_clusters == 2


def test_cli_missing_config(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "nope.toml")]) == 1
    assert "[config]" in capsys.readouterr().err
