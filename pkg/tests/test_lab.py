import csv
import json

import numpy as np
import pytest

from dbplab.errors import ConfigError, NumericError, TrainingError
from dbplab.lab import config as config_mod
from dbplab.lab.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from dbplab.lab.data import load_dataset, save_dataset, synth_dataset
from dbplab.lab.runners import METRIC_COLUMNS, write_csv
from dbplab.lab.training import _check, train_classifier, train_denoiser
from dbplab.diffusion import Schedule, make_linear_schedule
from dbplab.nets import ClassifierNet, DenoiserNet

TINY = {
    "dataset": {"n_train": 64, "n_test": 16},
    "schedule": {"T": 20},
    "purify": {"t_star": 4, "nfe": 2},
    "classifier": {"hidden": 8, "epochs": 1},
    "diffusion": {"hidden": 8, "depth": 2, "time_dim": 4, "epochs": 1},
    "attack": {"steps": 4, "eot_samples": 2},
    "eval": {"n_samples": 6, "chunk_size": 4, "settings": ["clean", "pgd_eot", "dw_both", "dw_semi-2"]},
    "addt": {"epochs": 1, "batch_size": 32, "t_max": 5},
    "analysis": {"eot_sweep": [1, 2], "sweep_samples": 4, "sweep_steps": 4, "variance_ns": [1, 2],
                 "variance_repeats": 2, "variance_samples": 2, "landscape_resolution": 5},
}


def write_config(tmp_path, data, name="config.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


@pytest.mark.parametrize("style", ["bars", "strokes"])
def test_dataset_same_seed_same_bytes(style):
    a, b = synth_dataset(5, 12, style=style), synth_dataset(5, 12, style=style)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert synth_dataset(6, 12, style=style).images.tobytes() != a.images.tobytes()


def test_dataset_balanced_and_saved(tmp_path):
    ds = synth_dataset(1, 40, distractors=2)
    assert np.bincount(ds.labels).tolist() == [10] * 4
    save_dataset(ds, tmp_path / "d.dbpt")
    back = load_dataset(tmp_path / "d.dbpt")
    assert back.images.tobytes() == ds.images.tobytes() and back.generator_seed == 1
    with pytest.raises(ConfigError):
        synth_dataset(1, 4, num_classes=3)


def test_zero_epochs_leave_weights_unchanged():
    x = synth_dataset(1, 16).flat
    clf = ClassifierNet(256, 4, hidden=6, seed=1)
    den = DenoiserNet(256, 20, hidden=6, seed=1)
    before = [p.data.copy() for p in clf.parameters() + den.parameters()]
    train_classifier(x, np.zeros(16, int), 4, epochs=0, net=clf)
    train_denoiser(x, make_linear_schedule(20), epochs=0, net=den)
    after = [p.data for p in clf.parameters() + den.parameters()]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(before, after))


# strict per-epoch decrease and held-out accuracy are checked on the full default run in test_acceptance
def test_losses_go_down():
    ds = synth_dataset(1, 256, style="strokes", noise_std=0.02)
    _, curve = train_denoiser(ds.flat, make_linear_schedule(100), epochs=6, batch_size=32, lr=2e-3, hidden=64,
                              depth=2, time_dim=8)
    assert curve[-1] < curve[0]
    _, curve = train_classifier(ds.flat, ds.labels, 4, epochs=6, batch_size=32, lr=3e-3)
    assert curve[-1] < curve[0]


def test_divergence_raises():
    with pytest.raises((NumericError, TrainingError)):
        train_denoiser(np.full((4, 16), np.nan), make_linear_schedule(10), epochs=1, hidden=4)
    with pytest.raises(TrainingError):
        _check(float("nan"), "x")


def test_config_roundtrip(tmp_path):
    cfg = config_mod.from_dict(TINY)
    config_mod.dump(cfg, tmp_path / "c.json")
    assert config_mod.load(tmp_path / "c.json") == cfg
    assert config_mod.from_dict({}).eval.settings[-1] == "dw_semi-8"


@pytest.mark.parametrize("bad", [
    {"nope": {}},
    {"attack": {"radius_typo": 1}},
    {"attack": {"norm": "l3"}},
    {"addt": {"t_max": 0}},
    {"addt": {"lambda_min": 0.4, "lambda_max": 0.2}},
    {"eval": {"n_samples": 10_000}},
    {"schedule": {"T": 0}},
    {"analysis": {"eot_sweep": [0, 2]}},
    [],
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        config_mod.from_dict(bad)


def test_write_csv_format(tmp_path):
    write_csv(tmp_path / "m.csv", ("a", "b"), [(1, 0.1), ("x", np.float64(2.5))])
    assert (tmp_path / "m.csv").read_text() == "a,b\n1,0.1\nx,2.5\n"


def test_cli_end_to_end(tmp_path):
    cfg = write_config(tmp_path, TINY)
    out = tmp_path / "out"
    for cmd in ("synth", "train-classifier", "train-diffusion", "addt", "eval", "analyze"):
        assert main([cmd, "--config", cfg, "--out", str(out)]) == EXIT_OK, cmd
    for name in ("dataset_train.dbpt", "classifier.dbpt.json", "denoiser.dbpt", "denoiser_addt.dbpt",
                 "addt_metrics.csv", "reports/dw_both.dbpt", "reports_addt/pgd_eot.dbpt.json",
                 "eot_sweep.csv", "gradient_variance.json", "trajectories.json"):
        assert (out / name).exists(), name
    for name in ("metrics.csv", "metrics_addt.csv"):
        rows = list(csv.reader(open(out / name)))
        assert tuple(rows[0]) == METRIC_COLUMNS
        assert [r[0] for r in rows[1:]] == TINY["eval"]["settings"]
        assert all(0 <= float(r[5]) <= 1 for r in rows[1:])
    assert Schedule.from_json((out / "schedule.json").read_text()).T == 20
    land = list(csv.reader(open(out / "landscape.csv")))
    assert land[0] == ["a", "b", "loss"] and len(land) == 26

    again = tmp_path / "again"
    for cmd in ("train-classifier", "train-diffusion", "eval"):
        main([cmd, "--config", cfg, "--out", str(again)])
    assert (again / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_cli_config_errors(tmp_path, capsys):
    out = str(tmp_path / "out")
    bad_json = tmp_path / "bad.json"
    bad_json.write_text("{not json")
    assert main(["synth", "--config", str(bad_json), "--out", out]) == EXIT_CONFIG
    assert main(["synth", "--config", write_config(tmp_path, {"eval": {"bogus": 1}}), "--out", out]) == EXIT_CONFIG
    assert main(["synth", "--config", str(tmp_path / "missing.json"), "--out", out]) == EXIT_CONFIG
    assert main(["eval", "--config", write_config(tmp_path, TINY), "--out", out]) == EXIT_CONFIG
    assert main(["frobnicate", "--config", "x", "--out", out]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_training_error(tmp_path):
    data = json.loads(json.dumps(TINY))
    data["diffusion"]["loss_threshold"] = 1e-9
    assert main(["train-diffusion", "--config", write_config(tmp_path, data),
                 "--out", str(tmp_path / "out")]) == EXIT_NUMERIC
