import json
from pathlib import Path

import pytest

from sgreg.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, main


def run_cli(*argv):
    return main(list(argv))


def test_parser_default_split_sizes():
    args = build_parser().parse_args(["generate", "--out", "x"])
    assert (args.train, args.val, args.test) == (100, 10, 100)


def test_generate_is_deterministic(tiny_root, tmp_path):
    code = run_cli(
        "generate", "--out", str(tmp_path / "again"), "--seed", "5",
        "--train", "8", "--val", "2", "--test", "4", "--plain-test", "4",
        "--image-size", "32",
    )
    assert code == EXIT_OK
    for split in ("conflict/train", "conflict/val", "conflict/test", "plain/test"):
        a = json.loads((tiny_root / split / "manifest.json").read_text())
        b = json.loads((tmp_path / "again" / split / "manifest.json").read_text())
        assert a["dataset_hash"] == b["dataset_hash"], split


def test_generate_zero_pairs_is_usage_error(tmp_path, capsys):
    code = run_cli("generate", "--out", str(tmp_path / "z"), "--train", "0")
    assert code == EXIT_USAGE
    assert "error[usage]:" in capsys.readouterr().err


def test_generate_refuses_nonempty_dir(tiny_root, capsys):
    code = run_cli("generate", "--out", str(tiny_root), "--train", "2", "--test", "2")
    assert code == EXIT_DATA
    assert "error[data]:" in capsys.readouterr().err


def test_generate_dry_run_writes_nothing(tmp_path, capsys):
    out = tmp_path / "dry"
    code = run_cli("generate", "--out", str(out), "--dry-run")
    assert code == EXIT_OK
    assert "would generate" in capsys.readouterr().out
    assert not out.exists()


def test_unknown_subcommand_is_usage_error():
    assert run_cli("frobnicate") == EXIT_USAGE


def test_experiment_dry_run(tiny_root, tmp_path, capsys):
    out = tmp_path / "exp"
    code = run_cli("experiment", "--data", str(tiny_root), "--out", str(out), "--dry-run")
    assert code == EXIT_OK
    captured = capsys.readouterr().out
    assert "planned stages" in captured
    assert not (out / "manifest.json").exists()


def test_experiment_missing_data_is_data_error(tmp_path, capsys):
    code = run_cli("experiment", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"))
    assert code == EXIT_DATA
    assert "error[data]:" in capsys.readouterr().err


def test_experiment_results_layout(tiny_experiment):
    top = sorted(p.name for p in tiny_experiment.iterdir())
    assert top == ["checkpoints", "manifest.json", "plots", "table.csv", "table.json"]
    checkpoints = sorted(p.name for p in (tiny_experiment / "checkpoints").glob("*.ckpt"))
    assert checkpoints == [
        "ISTN-e-affine.ckpt",
        "ISTN-i-affine.ckpt",
        "STN-s-affine.ckpt",
        "STN-u-affine.ckpt",
    ]
    assert (tiny_experiment / "plots" / "comparison_conflict.png").exists()
    assert (tiny_experiment / "plots" / "itn_evolution_ISTN-e.png").exists()
    table = json.loads((tiny_experiment / "table.json").read_text())
    assert set(table) == {"conflict", "plain"}
    manifest = json.loads((tiny_experiment / "manifest.json").read_text())
    assert manifest["format"] == "sgreg-experiment"
    assert set(manifest["checkpoint_hashes"]) == {"STN-u", "STN-s", "ISTN-e", "ISTN-i"}


def test_experiment_rerun_from_manifest_reproduces_dice(tiny_experiment, tiny_rerun):
    t1 = json.loads((tiny_experiment / "table.json").read_text())
    t2 = json.loads((tiny_rerun / "table.json").read_text())
    for split in t1:
        for r1, r2 in zip(t1[split], t2[split]):
            assert r1["method"] == r2["method"] and r1["phase"] == r2["phase"]
            assert abs(r1["dice_mean"] - r2["dice_mean"]) < 0.01, (split, r1["method"])


def test_experiment_rerun_rejects_changed_dataset(tiny_experiment, tmp_path, capsys):
    # a dataset generated from a different seed has different content hashes
    other = tmp_path / "other-data"
    assert run_cli(
        "generate", "--out", str(other), "--seed", "6",
        "--train", "8", "--val", "2", "--test", "4", "--plain-test", "4",
        "--image-size", "32",
    ) == EXIT_OK
    code = run_cli(
        "experiment", "--from-manifest", str(tiny_experiment / "manifest.json"),
        "--data", str(other), "--out", str(tmp_path / "o"),
    )
    assert code == EXIT_DATA
    err = capsys.readouterr().err
    assert "error[data]:" in err and "changed since the manifest run" in err


def test_register_and_evaluate_smoke(tiny_root, tiny_experiment, tmp_path, capsys):
    model = tiny_experiment / "checkpoints" / "ISTN-e-affine.ckpt"
    pair_dir = tiny_root / "conflict" / "test"
    seed = json.loads((pair_dir / "manifest.json").read_text())["seeds"][0]
    out = tmp_path / "reg"
    code = run_cli(
        "register", "--model", str(model),
        "--moving", str(pair_dir / str(seed) / "M.raster"),
        "--fixed", str(pair_dir / str(seed) / "F.raster"),
        "--refine", "--iters", "25", "--out", str(out),
    )
    assert code == EXIT_OK
    assert (out / "params.txt").exists()
    assert (out / "warped.raster").exists()
    trace = json.loads((out / "refine_trace.json").read_text())
    assert trace["iterations_run"] >= 1
    assert (out / "refine_trace.png").exists()
    values = [float(v) for v in (out / "params.txt").read_text().split()]
    assert len(values) == 6

    out_eval = tmp_path / "eval"
    code = run_cli(
        "evaluate", "--models", str(model), "--data", str(pair_dir),
        "--out", str(out_eval), "--refine-iters", "20", "--oracle-iters", "20",
    )
    assert code == EXIT_OK
    assert (out_eval / "table.json").exists()


def test_register_missing_model_is_data_error(tmp_path, capsys):
    code = run_cli(
        "register", "--model", str(tmp_path / "nope.ckpt"),
        "--moving", "a", "--fixed", "b", "--out", str(tmp_path),
    )
    assert code == EXIT_DATA
    assert "error[data]:" in capsys.readouterr().err
