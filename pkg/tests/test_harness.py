import csv
import dataclasses
import math

import numpy as np
import pytest

from metasplit import harness, nncore, splitnet
from metasplit.config import ExperimentConfig, load_config
from metasplit.harness import classification_metrics
from metasplit.meta import MetaConfig
from metasplit.nncore import ConfigError


def tiny_experiment(**kw):
    meta = MetaConfig(tasks=2, ways=3, shots=2, queries=4, eta=0.05, beta=0.001, epochs=2,
                      test_steps=3)
    base = dict(meta=meta, test_tasks=2)
    base.update(kw)
    return dataclasses.replace(ExperimentConfig(), **base)


# ---------------------------------------------------------------- metrics

def test_perfect_predictions():
    m = classification_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)


def test_constant_predictor_two_classes():
    m = classification_metrics([0, 0, 0, 0], [0, 0, 1, 1], 2)
    assert m.accuracy == 0.5
    # class 0: p=0.5 r=1 f1=2/3; class 1: all zero
    assert m.precision == pytest.approx(0.25) and m.recall == pytest.approx(0.5)
    assert m.f1 == pytest.approx(1 / 3)


def test_accuracy_two_paths(rng):
    preds, labels = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    cm = harness.confusion_matrix(preds, labels, 4)
    m = classification_metrics(preds, labels, 4)
    assert m.accuracy == pytest.approx(np.trace(cm) / 50) == pytest.approx(np.mean(preds == labels))
    assert cm.sum() == 50


def test_absent_classes_flagged():
    m = classification_metrics([0, 1], [0, 1], 3)
    assert m.absent_classes == (2,)


def test_length_mismatch():
    with pytest.raises(ValueError):
        classification_metrics([0], [0, 1], 2)


def test_objective_p1():
    assert harness.objective_p1([[0.5, 0.5], [1.0]], 5, 10, 0.0) == pytest.approx(2.0)
    assert harness.objective_p1([np.zeros(3)], 5, 10, 1.0) == pytest.approx(50.0)
    with pytest.raises(ConfigError):
        harness.objective_p1([[0.0]], 21, 10, 0.0, images_per_class=20)


# ---------------------------------------------------------------- flops

def test_fc_flops_hand_value():
    cfg = nncore.ModelConfig((nncore.FLATTEN, nncore.fc(10)), (64,), 10)
    assert dict(harness.layer_flops(cfg))["1:FullyConnected"] == 640 + 10


def test_conv_block_flops_hand_value():
    cfg = nncore.default_config(5)
    per_layer = dict(harness.layer_flops(cfg))
    assert per_layer["0:Conv2d"] == 64 * 14 * 14 * 9 + 64 * 14 * 14
    assert per_layer["1:Norm"] == 2 * 64 * 14 * 14
    assert per_layer["2:ReLU"] == 64 * 14 * 14
    assert per_layer["3:MaxPool"] == 3 * 64 * 13 * 13
    assert per_layer["12:Flatten"] == 0


def test_flops_partition_and_trend():
    cfg = nncore.default_config(5)
    total = sum(o for _, o in harness.layer_flops(cfg))
    dev = []
    for cut in (1, 2, 3):
        rep = harness.flop_report(cfg, cut)
        assert rep.total == total
        dev.append(rep.device)
    assert dev[0] < dev[1] < dev[2]


# ---------------------------------------------------------------- runs

def test_train_msl_report(small_ds):
    rep = harness.train(tiny_experiment(), small_ds)
    assert rep.mode == "msl" and len(rep.curve) == 4 and len(rep.cp_rows) == 2
    assert len(rep.train_log) == 2 and not math.isnan(rep.meta_loss_first)
    assert 0 <= rep.coverage <= 1 and 0 <= rep.inefficiency <= 3
    # traffic: 2 epochs x 2 tasks x (6 + 12 images) each way, plus meta-test
    per_image = splitnet.smashed_payload_bytes(splitnet.CutPoint(3), 1)
    train_fwd = 2 * 2 * (6 + 12) * per_image
    test_fwd = 2 * (3 * 6 + 4 * 12) * per_image
    assert rep.bytes_fwd == train_fwd + test_fwd
    assert rep.bytes_bwd == train_fwd + 2 * 3 * 6 * per_image


def test_modes_share_init_and_episodes(small_ds):
    sl = harness.train(tiny_experiment(mode="sl"), small_ds)
    dnn = harness.train(tiny_experiment(mode="dnn"), small_ds)
    # identity channel: split SGD == monolithic SGD
    np.testing.assert_allclose(sl.curve, dnn.curve)
    assert math.isnan(sl.meta_loss_first) and sl.train_log == []
    assert dnn.flops_aggregator == 0 and dnn.bytes_fwd == 0
    assert dnn.flops_device == sl.flops_device + sl.flops_aggregator


def test_zero_lr_is_flat_near_chance(small_ds):
    accs = []
    for seed in range(3):
        cfg = tiny_experiment(mode="sl", seed=seed, test_tasks=3,
                              meta=dataclasses.replace(tiny_experiment().meta, eta=0.0, seed=seed))
        rep = harness.train(cfg, small_ds)
        assert len(set(rep.curve)) == 1
        accs.append(rep.curve[0])
    assert abs(np.mean(accs) - 1 / 3) < 0.15


def test_train_deterministic_csv(tmp_path, small_ds):
    cfg = tiny_experiment(channel=dataclasses.replace(ExperimentConfig().channel, snr_db=10.0, fading=True))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    harness.train(cfg, small_ds).write_csv(a)
    harness.train(cfg, small_ds).write_csv(b)
    assert a.read_bytes() == b.read_bytes()


def test_report_replayable(tmp_path):
    cfg = load_config(overrides=["meta.E=1", "meta.T=1", "meta.Y=3", "meta.K=2", "meta.Q=3",
                                 "meta.test_steps=2", "test_tasks=1", "synth.num_classes=20",
                                 "synth.images_per_class=6", "meta.M=6", "seed=4"])
    a = tmp_path / "a.csv"
    harness.train(cfg).write_csv(a)
    assert harness.config_from_report(a) == cfg
    b = tmp_path / "b.csv"
    harness.train(harness.config_from_report(a)).write_csv(b)
    assert a.read_bytes() == b.read_bytes()


def test_cp_csv(tmp_path, small_ds):
    path = tmp_path / "cp.csv"
    harness.train(tiny_experiment(mode="sl"), small_ds).write_cp_csv(path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == ("task_id", "n_cal", "alpha", "q_hat", "coverage", "inefficiency")
    assert len(rows) == 3 and rows[1][1] == "6"


def test_session_data_is_one_support_set():
    cfg = load_config(overrides=["synth.num_classes=20", "meta.Y=3", "meta.K=4"])
    x, y = harness.session_data(cfg)
    assert x.shape == (12, 1, 28, 28) and list(np.bincount(y)) == [4, 4, 4]
    x2, _ = harness.session_data(cfg)
    assert np.array_equal(x, x2)


def test_bad_data_source():
    with pytest.raises(ConfigError):
        harness.build_dataset(dataclasses.replace(ExperimentConfig(), data="mnist"))


# ---------------------------------------------------------------- sweeps

def test_sweep_single_point_equals_train(tmp_path, small_ds):
    cfg = tiny_experiment(mode="sl")
    out = tmp_path / "sweep.csv"
    harness.sweep("shots", [2], cfg, out, modes=("sl",), seeds=(0,))
    rows = {r["metric"]: r["value"] for r in csv.DictReader(out.open())}
    rep = dict(harness.train(cfg).rows())
    for metric in harness.SWEEP_METRICS:
        assert rows[metric] == rep[metric]
    assert rows["acc_step_3"] == rep["acc_step_3"]


def test_sweep_points():
    cfg = ExperimentConfig()
    assert harness.sweep_point(cfg, "shots", "3").meta.shots == 3
    assert harness.sweep_point(cfg, "tasks", 7).meta.tasks == 7
    assert harness.sweep_point(cfg, "cut", "1").cut == 1
    assert harness.sweep_point(cfg, "snr", "5").channel.snr_db == 5.0
    with pytest.raises(ConfigError):
        harness.sweep_point(cfg, "depth", 1)


def test_sweep_long_form(tmp_path):
    cfg = tiny_experiment(mode="sl", data="synth",
                          synth=dataclasses.replace(ExperimentConfig().synth, num_classes=20, images_per_class=6),
                          meta=dataclasses.replace(tiny_experiment().meta, images_per_class=6))
    out = tmp_path / "s.csv"
    harness.sweep("cut", ["1", "3"], cfg, out, modes=("sl", "dnn"), seeds=(0, 1))
    rows = list(csv.DictReader(out.open()))
    assert {(r["grid_value"], r["mode"], r["seed"]) for r in rows} == {
        (c, m, s) for c in ("1", "3") for m in ("sl", "dnn") for s in ("0", "1")}
    bytes_fwd = {r["grid_value"]: int(r["value"]) for r in rows
                 if r["metric"] == "bytes_fwd" and r["mode"] == "sl" and r["seed"] == "0"}
    assert bytes_fwd["1"] > bytes_fwd["3"]
