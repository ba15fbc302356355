"""Shared fixtures: the full acceptance experiment and a tiny CLI run.

The acceptance experiment (100 training pairs, 100-pair conflict and plain
test sets, all four variants) runs once per session and takes roughly 20
minutes on a 2-core desktop CPU; everything in test_acceptance.py and a few
derived checks consume its results.
"""

import pytest

from sgreg.cli import main as cli_main
from sgreg.experiment import ExperimentConfig, run_experiment

ACCEPTANCE_DATA_SEED = 100
ACCEPTANCE_IMAGE_SIZE = 48
ACCEPTANCE_SPLITS = {"train": 100, "val": 10, "test": 100, "plain_test": 100}
ACCEPTANCE_EXPERIMENT = dict(
    seed=17,
    epochs=220,
    batch_size=16,
    learning_rate=1e-3,
    refine_max_iters=300,
    refine_learning_rate=1e-3,
    oracle_iters=250,
    oracle_restarts=3,
)


def generate_acceptance_dataset(root) -> int:
    return cli_main(
        [
            "generate",
            "--out", str(root),
            "--seed", str(ACCEPTANCE_DATA_SEED),
            "--train", str(ACCEPTANCE_SPLITS["train"]),
            "--val", str(ACCEPTANCE_SPLITS["val"]),
            "--test", str(ACCEPTANCE_SPLITS["test"]),
            "--plain-test", str(ACCEPTANCE_SPLITS["plain_test"]),
            "--image-size", str(ACCEPTANCE_IMAGE_SIZE),
            "--force",
        ]
    )


@pytest.fixture(scope="session")
def acceptance_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance-data")
    assert generate_acceptance_dataset(root) == 0
    return root


@pytest.fixture(scope="session")
def acceptance_run(acceptance_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance-run")
    cfg = ExperimentConfig(data_root=str(acceptance_dataset), **ACCEPTANCE_EXPERIMENT)
    return run_experiment(cfg, out, progress=True)


# ---------------------------------------------------------------------------
# small shared CLI artifacts


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data")
    code = cli_main(
        [
            "generate", "--out", str(root), "--seed", "5",
            "--train", "8", "--val", "2", "--test", "4", "--plain-test", "4",
            "--image-size", "32",
        ]
    )
    assert code == 0
    return root


@pytest.fixture(scope="session")
def tiny_experiment(tiny_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-exp") / "run"
    cfg = tmp_path_factory.mktemp("cli-cfg") / "exp.yaml"
    cfg.write_text(
        "epochs: 12\nseed: 9\nrefine_max_iters: 40\noracle_iters: 40\noracle_restarts: 2\n"
    )
    code = cli_main(
        ["experiment", "--config", str(cfg), "--data", str(tiny_root), "--out", str(out)]
    )
    assert code == 0
    return out


@pytest.fixture(scope="session")
def tiny_rerun(tiny_experiment, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-rerun") / "run"
    code = cli_main(
        ["experiment", "--from-manifest", str(tiny_experiment / "manifest.json"), "--out", str(out)]
    )
    assert code == 0
    return out
