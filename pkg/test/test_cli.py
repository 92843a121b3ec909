import csv
import json
import os

import pytest
from debiaser.cli import dispatch

SMALL = {
    "gen": {"n_train": 240, "n_test": 120, "seed": 5},
    "pretrain": {"learning_rate": 0.02, "epochs": 4, "batch_size": 32},
    "debias": {"epochs": 1, "batch_size": 40},
    "sweep": {"lambda_min": 0.03, "lambda_max": 0.11, "lambda_step": 0.04, "repeats": 1, "epochs": 1},
    "evaluation": {"hsic_samples": 200},
}


def write_config(path, data):
    with open(path, "w") as f:
        json.dump(data, f)
    return str(path)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def small_config(tmp_path):
    return write_config(tmp_path / "config.json", SMALL)


def test_unknown_subcommand(small_config, capsys):
    assert dispatch(["foo", "--config", small_config]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_config_flag():
    assert dispatch(["gen"]) == 2


def test_malformed_config_names_key(tmp_path, capsys):
    path = write_config(tmp_path / "bad.json", {"debias": {"lam": "lots"}})
    assert dispatch(["gen", "--config", path]) == 2
    assert "debias.lam" in capsys.readouterr().err


def test_invalid_thread_count(small_config, monkeypatch):
    monkeypatch.setenv("DEBIAS_THREADS", "-3")
    assert dispatch(["gen", "--config", small_config, "--out", "unused"]) == 2


def test_eval_before_train(small_config, tmp_path, capsys):
    assert dispatch(["eval", "--config", small_config, "--out", str(tmp_path / "run")]) == 1
    assert "Missing" in capsys.readouterr().err


def test_pipeline(small_config, tmp_path, capsys):
    out = tmp_path / "run"
    run = ["--config", small_config, "--out", str(out)]

    assert dispatch(["gen", *run]) == 0
    assert (out / "data" / "train" / "list_attr.txt").is_file()
    assert len(os.listdir(out / "data" / "test" / "images")) == 120
    written = json.loads((out / "data" / "config.json").read_text())
    assert written["gen"]["n_train"] == 240
    assert written["debias"]["lam"] == 0.07

    assert dispatch(["pretrain", *run]) == 0
    assert (out / "checkpoints" / "classifier.ckpt").is_file()

    assert dispatch(["train", *run]) == 0
    assert (out / "checkpoints" / "unet.ckpt").is_file()
    log = read_csv(out / "reports" / "train_log.csv")
    assert len(log) == 6
    assert [row["transform"] for row in read_csv(out / "reports" / "metrics.csv")] == ["original", "reconstructed"]

    assert dispatch(["eval", *run]) == 0
    assert (out / "reports" / "reconstructions.png").is_file()

    assert dispatch(["sweep", *run]) == 0
    sweep = read_csv(out / "reports" / "sweep.csv")
    assert [float(row["lambda"]) for row in sweep] == [0.03, 0.07, 0.11]
    for row in sweep:
        assert float(row["ap_sd"]) == float(row["dp_sd"]) == float(row["deo_sd"]) == 0.0
    for metric in ("ap", "dp", "deo"):
        assert (out / "reports" / f"sweep_{metric}.svg").is_file()

    assert dispatch(["spillover", *run]) == 0
    spillover = read_csv(out / "reports" / "spillover.csv")
    assert [row["attribute"] for row in spillover][-1] == "Aux_6"
    assert (out / "reports" / "categories.csv").is_file()
    assert os.listdir(out / "checkpoints" / "attributes")
    assert "Pearson" in capsys.readouterr().out


def test_sweep_is_independent_of_threads(small_config, tmp_path, monkeypatch):
    out = tmp_path / "run"
    run = ["--config", small_config, "--out", str(out)]
    assert dispatch(["gen", *run]) == 0
    assert dispatch(["pretrain", *run]) == 0

    assert dispatch(["sweep", *run]) == 0
    sequential = (out / "reports" / "sweep.csv").read_bytes()
    monkeypatch.setenv("DEBIAS_THREADS", "3")
    assert dispatch(["sweep", *run]) == 0
    assert (out / "reports" / "sweep.csv").read_bytes() == sequential


def test_train_is_reproducible(small_config, tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        run = ["--config", small_config, "--out", str(out)]
        for command in ("gen", "pretrain", "train"):
            assert dispatch([command, *run]) == 0
        outputs.append(
            [
                (out / "checkpoints" / "classifier.ckpt").read_bytes(),
                (out / "checkpoints" / "unet.ckpt").read_bytes(),
                (out / "reports" / "train_log.csv").read_bytes(),
                (out / "reports" / "metrics.csv").read_bytes(),
            ]
        )
    assert outputs[0] == outputs[1]


def test_seed_override_changes_data(small_config, tmp_path):
    for name, seed in (("a", 1), ("b", 2)):
        assert dispatch(["gen", "--config", small_config, "--out", str(tmp_path / name), "--seed", str(seed)]) == 0
    first = (tmp_path / "a" / "data" / "train" / "list_attr.txt").read_bytes()
    second = (tmp_path / "b" / "data" / "train" / "list_attr.txt").read_bytes()
    assert first != second


def attribute_checkpoints(out):
    directory = out / "checkpoints" / "attributes"
    return {path.name: path.read_bytes() for path in sorted(directory.iterdir())}


def test_spillover_retrains_attribute_classifiers_for_new_data(small_config, tmp_path):
    def run_all(out, seed):
        run = ["--config", small_config, "--out", str(out), "--seed", str(seed)]
        for command in ("gen", "pretrain", "train", "spillover"):
            assert dispatch([command, *run]) == 0
        return attribute_checkpoints(out)

    shared = tmp_path / "shared"
    first = run_all(shared, 1)
    assert dispatch(["spillover", "--config", small_config, "--out", str(shared), "--seed", "1"]) == 0
    assert attribute_checkpoints(shared) == first

    second = run_all(shared, 2)
    fresh = run_all(tmp_path / "fresh", 2)
    assert second == fresh
    assert all(second[name] != first[name] for name in first if name.endswith(".ckpt"))
    spillover = (shared / "reports" / "spillover.csv").read_bytes()
    assert spillover == (tmp_path / "fresh" / "reports" / "spillover.csv").read_bytes()


def full_run(tmp_path, config):
    run = ["--config", write_config(tmp_path / "config.json", config), "--out", str(tmp_path / "run")]
    for command in ("gen", "pretrain"):
        assert dispatch([command, *run]) == 0
    return run


@pytest.mark.slow
def test_debiasing_end_to_end(tmp_path):
    passed = []
    for lam in (0.03, 0.07, 0.11):
        out = tmp_path / f"lam{lam}"
        run = full_run(out, {"debias": {"lam": lam}})
        assert dispatch(["train", *run]) == 0
        original, reconstructed = read_csv(out / "run" / "reports" / "metrics.csv")
        passed.append(
            float(reconstructed["dp"]) <= 0.5 * float(original["dp"])
            and float(reconstructed["ap"]) >= 0.8 * float(original["ap"])
        )
    assert any(passed)


@pytest.mark.slow
def test_sweep_trade_off(tmp_path, capsys):
    run = full_run(tmp_path, {"sweep": {"lambda_step": 0.02}})
    capsys.readouterr()
    assert dispatch(["sweep", *run]) == 0
    summary = capsys.readouterr().out
    assert len(read_csv(tmp_path / "run" / "reports" / "sweep.csv")) == 8
    dp = float(summary.split("Spearman(lambda, DP) = ")[1].split()[0])
    ap = float(summary.split("Spearman(lambda, AP) = ")[1].split()[0])
    assert dp <= -0.5
    assert ap <= -0.5


@pytest.mark.slow
def test_spillover_correlation(tmp_path, capsys):
    run = full_run(tmp_path, {})
    assert dispatch(["train", *run]) == 0
    capsys.readouterr()
    assert dispatch(["spillover", *run]) == 0
    r = float(capsys.readouterr().out.split("Pearson(HSIC with target, |dDP|) = ")[1].split()[0])
    assert r > 0
