"""Experiment orchestration: DNN / SL / MSL runs, metrics, sweeps and CSV reports."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import conformal, meta, nncore, splitnet
from .channel import ChannelPair
from .config import ExperimentConfig, flatten, from_flat
from .data import Dataset, load_omniglot, split_pools, synth_glyphs
from .meta import AdaptationResult, Episode, Traffic, derive_rng, derive_seed
from .nncore import ConfigError, ModelConfig

log = logging.getLogger(__name__)

# stream keys for derived RNGs, so no two consumers share a stream
_TEST_EPISODES = 101
_CP_SPLIT = 102
_TEST_CHANNEL = 103
_SESSION_DATA = 104


# ---------------------------------------------------------------- metrics

def objective_p1(per_task_losses: Sequence, shots: int, ways: int, zeta: float,
                 images_per_class: int = 20) -> float:
    """Summed loss over tasks and examples plus ``zeta * K * Y``."""
    if shots > images_per_class:
        raise ConfigError(f"constraint violated: K={shots} > M={images_per_class}")
    total = float(sum(float(np.sum(task)) for task in per_task_losses))
    return total + zeta * shots * ways


@dataclass
class ClassificationMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    absent_classes: Tuple[int, ...] = ()


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, np.int64), np.asarray(preds, np.int64)), 1)
    return cm


def classification_metrics(preds, labels, num_classes: int) -> ClassificationMetrics:
    """Accuracy and macro precision/recall/F1 (labels on rows of the confusion matrix)."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(float)
    pred_count = cm.sum(axis=0)
    true_count = cm.sum(axis=1)
    precision = np.divide(tp, pred_count, out=np.zeros_like(tp), where=pred_count > 0)
    recall = np.divide(tp, true_count, out=np.zeros_like(tp), where=true_count > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    absent = tuple(int(c) for c in np.flatnonzero(true_count == 0))
    acc = float(tp.sum() / max(len(labels), 1))
    return ClassificationMetrics(acc, float(precision.mean()), float(recall.mean()),
                                 float(f1.mean()), absent)


# ---------------------------------------------------------------- compute accounting

@dataclass
class FlopReport:
    device: int
    aggregator: int
    per_layer: List[Tuple[str, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.device + self.aggregator


def layer_flops(cfg: ModelConfig) -> List[Tuple[str, int]]:
    """Per-sample forward operation counts.

    Conv/FC: multiply-adds plus bias adds. Norm: two per element (scale,
    shift). ReLU: one per element. MaxPool: k*k - 1 comparisons per output.
    """
    shapes = nncore.layer_shapes(cfg)
    out = []
    for j, spec in enumerate(cfg.layers):
        src, dst = shapes[j], shapes[j + 1]
        n_out = int(np.prod(dst))
        if spec.kind == "Conv2d":
            ops = n_out * src[0] * spec.kernel * spec.kernel + n_out
        elif spec.kind == "FullyConnected":
            ops = src[0] * spec.width + spec.width
        elif spec.kind == "Norm":
            ops = 2 * n_out
        elif spec.kind == "ReLU":
            ops = n_out
        elif spec.kind == "MaxPool":
            ops = n_out * (spec.kernel * spec.kernel - 1)
        else:
            ops = 0
        out.append((f"{cfg.first_index + j}:{spec.kind}", ops))
    return out


def flop_report(cfg: ModelConfig, cut: int) -> FlopReport:
    dev_cfg, agg_cfg = splitnet.split_config(cfg, splitnet.CutPoint(cut))
    dev, agg = layer_flops(dev_cfg), layer_flops(agg_cfg)
    return FlopReport(sum(o for _, o in dev), sum(o for _, o in agg), dev + agg)


# ---------------------------------------------------------------- data

def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data == "synth":
        ds = synth_glyphs(cfg.synth)
    elif cfg.data.startswith("omniglot:"):
        ds = load_omniglot(cfg.data.split(":", 1)[1], cfg.meta.images_per_class)
    else:
        raise ConfigError(f"data must be 'synth' or 'omniglot:<path>', got {cfg.data!r}")
    return split_pools(ds, cfg.meta_test_fraction, cfg.seed)


def test_episodes(ds: Dataset, cfg: ExperimentConfig) -> List[Episode]:
    pool = ds.test_classes or ds.train_classes
    rng = derive_rng(cfg.seed, _TEST_EPISODES)
    eps = []
    for i in range(cfg.test_tasks):
        task = meta.sample_task(pool, cfg.meta.ways, rng, i)
        eps.append(meta.sample_episode(ds, task, cfg.meta.shots, cfg.meta.queries, rng))
    return eps


def session_data(cfg: ExperimentConfig, ds: Optional[Dataset] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Support set of one seeded task; the training data for two-party SL sessions."""
    ds = ds or build_dataset(cfg)
    pool = ds.test_classes or ds.train_classes
    rng = derive_rng(cfg.seed, _SESSION_DATA)
    task = meta.sample_task(pool, cfg.meta.ways, rng)
    ep = meta.sample_episode(ds, task, cfg.meta.shots, 0, rng)
    return ep.support_x, ep.support_y


# ---------------------------------------------------------------- runs

def dnn_adapt(cfg: ModelConfig, params: nncore.Params, episode: Episode, steps: int,
              eta: float) -> AdaptationResult:
    """Monolithic baseline: the whole model trained on the device, no channel."""
    params = nncore.copy_params(params)

    def evaluate():
        logits = nncore.forward(params, cfg, episode.query_x).logits
        return logits, float(np.mean(logits.argmax(1) == episode.query_y))

    logits, acc = evaluate()
    curve = [acc]
    for _ in range(steps):
        trace = nncore.forward(params, cfg, episode.support_x)
        _, g = nncore.loss_softmax_ce(trace.logits, episode.support_y)
        grads, _ = nncore.backward(params, cfg, trace, g)
        params = nncore.sgd_step(params, grads, eta)
        logits, acc = evaluate()
        curve.append(acc)
    return AdaptationResult(curve, logits, nncore.per_example_ce(logits, episode.query_y), None)


@dataclass
class RunReport:
    mode: str
    seed: int
    curve: List[float]
    metrics: ClassificationMetrics
    coverage: float
    inefficiency: float
    q_hat: float
    p1: float
    bytes_fwd: int
    bytes_bwd: int
    flops_device: int
    flops_aggregator: int
    meta_loss_first: float
    meta_loss_last: float
    config: ExperimentConfig
    cp_rows: List[conformal.CPResult] = field(default_factory=list)
    train_log: List[meta.EpochLog] = field(default_factory=list)

    def accuracy_at(self, step: int) -> float:
        return self.curve[step]

    def rows(self) -> List[Tuple[str, str]]:
        m = self.metrics
        out = [("mode", self.mode), ("seed", str(self.seed))]
        out += [(f"acc_step_{i}", repr(a)) for i, a in enumerate(self.curve)]
        out += [
            ("accuracy", repr(m.accuracy)), ("precision", repr(m.precision)),
            ("recall", repr(m.recall)), ("f1", repr(m.f1)),
            ("absent_classes", " ".join(str(c) for c in m.absent_classes)),
            ("coverage", repr(self.coverage)), ("inefficiency", repr(self.inefficiency)),
            ("q_hat", repr(self.q_hat)), ("p1", repr(self.p1)),
            ("bytes_fwd", str(self.bytes_fwd)), ("bytes_bwd", str(self.bytes_bwd)),
            ("flops_device", str(self.flops_device)),
            ("flops_aggregator", str(self.flops_aggregator)),
            ("meta_loss_first", repr(self.meta_loss_first)),
            ("meta_loss_last", repr(self.meta_loss_last)),
        ]
        out += [(f"config.{k}", v) for k, v in flatten(self.config)]
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(("key", "value"))
            w.writerows(self.rows())

    def write_cp_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(conformal.CP_COLUMNS)
            for i, r in enumerate(self.cp_rows):
                w.writerow([i, r.n_cal, repr(r.alpha), repr(r.q_hat), repr(r.coverage),
                            repr(r.inefficiency)])


def config_from_report(path) -> ExperimentConfig:
    with open(path, newline="", encoding="utf-8") as f:
        rows = [(k[len("config."):], v) for k, v in csv.reader(f) if k.startswith("config.")]
    return from_flat(rows)


def train(cfg: ExperimentConfig, ds: Optional[Dataset] = None,
          init: Optional[splitnet.SplitPair] = None) -> RunReport:
    """One full run: optional meta-training, then adaptation on held-out tasks.

    Every mode starts from the same seeded initialization and is scored on
    the same meta-test episodes.
    """
    mcfg = cfg.meta
    ds = ds or build_dataset(cfg)
    episodes = test_episodes(ds, cfg)
    model_cfg = nncore.default_config(mcfg.ways)
    init = init or splitnet.init_pair(model_cfg, cfg.cut, cfg.seed)
    traffic = Traffic()
    logs: List[meta.EpochLog] = []
    if cfg.mode == "msl":
        init, logs = meta.meta_train(mcfg, ds, init, cfg.channel, traffic=traffic)

    results: List[AdaptationResult] = []
    for i, ep in enumerate(episodes):
        if cfg.mode == "dnn":
            jcfg, jparams = splitnet.join(init)
            res = dnn_adapt(jcfg, jparams, ep, mcfg.test_steps, mcfg.eta)
        else:
            channels = ChannelPair(cfg.channel, derive_seed(cfg.channel.seed, _TEST_CHANNEL, i))
            res = meta.meta_test(init, ep, mcfg.test_steps, mcfg.eta, channels)
            traffic.add(res.traffic)
        results.append(res)

    curve = np.mean([r.curve for r in results], axis=0).tolist()
    per_task = [classification_metrics(r.final_logits.argmax(1), ep.query_y, mcfg.ways)
                for r, ep in zip(results, episodes)]
    absent = sorted({c for m in per_task for c in m.absent_classes})
    metrics = ClassificationMetrics(
        float(np.mean([m.accuracy for m in per_task])),
        float(np.mean([m.precision for m in per_task])),
        float(np.mean([m.recall for m in per_task])),
        float(np.mean([m.f1 for m in per_task])),
        tuple(absent),
    )
    cp_rows = []
    for i, (r, ep) in enumerate(zip(results, episodes)):
        probs = nncore.softmax(r.final_logits.astype(np.float64))
        cp_rows.append(conformal.split_calibrate(probs, ep.query_y, cfg.cp,
                                                 derive_rng(cfg.seed, _CP_SPLIT, i)))
    flops = flop_report(model_cfg, cfg.cut)
    if cfg.mode == "dnn":
        flops = FlopReport(flops.total, 0, flops.per_layer)
    p1 = objective_p1([r.query_losses for r in results], mcfg.shots, mcfg.ways, cfg.zeta,
                      mcfg.images_per_class)
    return RunReport(
        mode=cfg.mode,
        seed=cfg.seed,
        curve=curve,
        metrics=metrics,
        coverage=float(np.mean([c.coverage for c in cp_rows])),
        inefficiency=float(np.mean([c.inefficiency for c in cp_rows])),
        q_hat=float(np.mean([c.q_hat for c in cp_rows])),
        p1=p1,
        bytes_fwd=traffic.fwd,
        bytes_bwd=traffic.bwd,
        flops_device=flops.device,
        flops_aggregator=flops.aggregator,
        meta_loss_first=logs[0].meta_loss if logs else float("nan"),
        meta_loss_last=logs[-1].meta_loss if logs else float("nan"),
        config=cfg,
        cp_rows=cp_rows,
        train_log=logs,
    )


# ---------------------------------------------------------------- sweeps

SWEEP_KINDS = ("shots", "tasks", "cut", "snr")
SWEEP_COLUMNS = ("kind", "grid_value", "mode", "seed", "metric", "value")
SWEEP_METRICS = ("accuracy", "precision", "recall", "f1", "coverage", "inefficiency", "q_hat",
                 "p1", "bytes_fwd", "bytes_bwd", "flops_device", "flops_aggregator")


def sweep_point(cfg: ExperimentConfig, kind: str, value) -> ExperimentConfig:
    if kind == "shots":
        return dataclasses.replace(cfg, meta=dataclasses.replace(cfg.meta, shots=int(value)))
    if kind == "tasks":
        return dataclasses.replace(cfg, meta=dataclasses.replace(cfg.meta, tasks=int(value)))
    if kind == "cut":
        return dataclasses.replace(cfg, cut=int(value))
    if kind == "snr":
        return dataclasses.replace(cfg, channel=dataclasses.replace(cfg.channel, snr_db=float(value)))
    raise ConfigError(f"sweep kind must be one of {SWEEP_KINDS}, got {kind!r}")


def sweep(kind: str, grid: Sequence, cfg: ExperimentConfig, out_path,
          modes: Sequence[str] = ("msl",), seeds: Sequence[int] = (0,)) -> List[Dict]:
    """One train per (grid value, mode, seed), appended to a long-form CSV as it goes."""
    if not grid:
        raise ConfigError("empty sweep grid")
    rows: List[Dict] = []
    datasets: Dict[int, Dataset] = {}
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        f.flush()
        for value in grid:
            for mode in modes:
                for seed in seeds:
                    point = sweep_point(dataclasses.replace(cfg, mode=mode, seed=seed,
                                                            meta=dataclasses.replace(cfg.meta, seed=seed)),
                                        kind, value)
                    if seed not in datasets:
                        datasets[seed] = build_dataset(point)
                    report = train(point, datasets[seed])
                    vals = dict(report.rows())
                    for metric in SWEEP_METRICS:
                        row = dict(kind=kind, grid_value=str(value), mode=mode, seed=seed,
                                   metric=metric, value=vals[metric])
                        rows.append(row)
                        w.writerow([row[c] for c in SWEEP_COLUMNS])
                    for i, a in enumerate(report.curve):
                        w.writerow([kind, value, mode, seed, f"acc_step_{i}", repr(a)])
                    f.flush()
    return rows
