"""Episodic meta-training of a split model (first-order MAML).

Each task adapts a private copy of the shared initialization with plain SGD
on its support set, the smashed activations and gradients crossing the
channel at every step. Query-set gradients at the adapted parameters are
summed over tasks and applied to the initialization with Adam.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import nncore, splitnet
from .channel import ChannelConfig, ChannelPair, DeepFadeError
from .data import Dataset
from .nncore import ConfigError, Grads, NonFiniteError, OptimState
from .splitnet import SplitPair

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaConfig:
    tasks: int = 20  # T
    ways: int = 10  # Y
    shots: int = 5  # K
    queries: int = 15  # Q
    images_per_class: int = 20  # M
    inner_steps: int = 1
    eta: float = 0.001
    beta: float = 0.01
    epochs: int = 1000  # E
    first_order: bool = True
    test_steps: int = 30
    outer_optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.shots > self.images_per_class:
            raise ConfigError(f"shots K={self.shots} exceeds images per class M={self.images_per_class}")
        if self.ways < 2:
            raise ConfigError("need at least 2 ways")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if self.shots < 1 or self.queries < 0 or self.tasks < 1 or self.epochs < 0:
            raise ConfigError("shots, tasks must be positive; queries, epochs non-negative")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown outer optimizer {self.outer_optimizer!r}")


@dataclass(frozen=True)
class Task:
    classes: Tuple[str, ...]
    task_id: int = 0


@dataclass
class Episode:
    task: Task
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray


@dataclass
class Traffic:
    """Payload bytes pushed through the channel, per direction."""

    fwd: int = 0
    bwd: int = 0

    def add(self, other: "Traffic"):
        self.fwd += other.fwd
        self.bwd += other.bwd


def derive_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def sample_task(pool: Sequence[str], ways: int, rng: np.random.Generator, task_id: int = 0) -> Task:
    if len(pool) < ways:
        raise ConfigError(f"class pool of {len(pool)} cannot supply {ways} ways")
    idx = rng.choice(len(pool), ways, replace=False)
    return Task(tuple(pool[i] for i in idx), task_id)


def sample_episode(ds: Dataset, task: Task, shots: int, queries: int,
                   rng: np.random.Generator) -> Episode:
    sx, sy, qx, qy = [], [], [], []
    for label, cid in enumerate(task.classes):
        imgs = ds.classes[cid]
        if len(imgs) < shots + queries:
            raise ConfigError(f"class {cid} has {len(imgs)} images, needs {shots + queries}")
        pick = rng.permutation(len(imgs))[: shots + queries]
        sx.append(imgs[pick[:shots]])
        qx.append(imgs[pick[shots:]])
        sy += [label] * shots
        qy += [label] * queries
    shape = ds.classes[task.classes[0]].shape[1:]
    return Episode(
        task,
        np.concatenate(sx),
        np.array(sy, dtype=np.int64),
        np.concatenate(qx) if queries else np.zeros((0,) + shape, np.float32),
        np.array(qy, dtype=np.int64),
    )


# ---------------------------------------------------------------- one split pass

@dataclass
class SplitResult:
    loss: float
    logits: np.ndarray
    device_grads: Grads
    agg_grads: Grads
    traffic: Traffic


def split_loss_and_grads(pair: SplitPair, x: np.ndarray, y: np.ndarray,
                         channels: ChannelPair) -> SplitResult:
    """Device forward, hop, aggregator forward/backward, hop back, device backward."""
    smashed, dev_trace = splitnet.device_forward(pair, x)
    traffic = Traffic(fwd=smashed.byte_size)
    received = splitnet.SmashedData(channels.send_forward(smashed.tensor), "post-channel")
    logits, agg_trace = splitnet.aggregator_forward(pair, received)
    loss, g_logits = nncore.loss_softmax_ce(logits, y)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    agg_grads, g_cut = splitnet.aggregator_backward(pair, agg_trace, g_logits)
    traffic.bwd = g_cut.byte_size
    g_received = splitnet.SmashedGrad(channels.send_backward(g_cut.tensor), "post-channel")
    dev_grads = splitnet.device_backward(pair, dev_trace, g_received)
    return SplitResult(loss, logits, dev_grads, agg_grads, traffic)


def split_sgd_step(pair: SplitPair, x, y, lr: float, channels: ChannelPair,
                   traffic: Optional[Traffic] = None) -> Optional[float]:
    """One in-place SGD step on both halves; returns the loss, or None if skipped."""
    try:
        res = split_loss_and_grads(pair, x, y, channels)
    except DeepFadeError as exc:
        log.warning("split step skipped: %s", exc)
        return None
    pair.agg_params = nncore.sgd_step(pair.agg_params, res.agg_grads, lr)
    pair.device_params = nncore.sgd_step(pair.device_params, res.device_grads, lr)
    if traffic is not None:
        traffic.add(res.traffic)
    return res.loss


def split_predict(pair: SplitPair, x: np.ndarray, channels: Optional[ChannelPair] = None,
                  traffic: Optional[Traffic] = None) -> np.ndarray:
    """Logits for a batch, the smashed data crossing the forward hop."""
    smashed, _ = splitnet.device_forward(pair, x)
    s = smashed.tensor
    if channels is not None:
        try:
            s = channels.send_forward(s)
        except DeepFadeError as exc:
            log.warning("inference transmission lost, using noiseless copy: %s", exc)
    if traffic is not None:
        traffic.fwd += smashed.byte_size
    logits, _ = splitnet.aggregator_forward(pair, splitnet.SmashedData(s, "post-channel"))
    return logits


# ---------------------------------------------------------------- MAML pieces

def inner_adapt(init: SplitPair, support_x, support_y, cfg: MetaConfig, channels: ChannelPair,
                steps: Optional[int] = None, lr: Optional[float] = None,
                traffic: Optional[Traffic] = None) -> SplitPair:
    """SGD on the support set, on a copy; ``init`` is never touched."""
    adapted = init.copy()
    lr = cfg.eta if lr is None else lr
    for _ in range(cfg.inner_steps if steps is None else steps):
        split_sgd_step(adapted, support_x, support_y, lr, channels, traffic)
    return adapted


def meta_loss(adapted: Sequence[SplitPair], episodes: Sequence[Episode],
              channels: Optional[Sequence[ChannelPair]] = None) -> float:
    total = 0.0
    for i, (pair, ep) in enumerate(zip(adapted, episodes)):
        ch = channels[i] if channels is not None else None
        logits = split_predict(pair, ep.query_x, ch)
        total += nncore.loss_softmax_ce(logits, ep.query_y)[0]
    return total


def sum_grads(per_task: Sequence[Grads]) -> Grads:
    out = {k: np.zeros_like(v) for k, v in per_task[0].items()}
    for g in per_task:
        for k in out:
            out[k] += g[k]
    return out


def meta_update(init: SplitPair, task_grads: Sequence[Grads], beta: float,
                optim: OptimState) -> Tuple[SplitPair, OptimState]:
    """Sum per-task gradients and step both halves of the initialization."""
    total = sum_grads(task_grads)
    joint = nncore.concat_params([init.device_params, init.agg_params])
    new, optim = nncore.optimizer_step(joint, total, beta, optim)
    out = init.copy()
    out.device_params = {k: new[k] for k in init.device_params}
    out.agg_params = {k: new[k] for k in init.agg_params}
    return out, optim


@dataclass
class EpochLog:
    epoch: int
    meta_loss: float
    mean_query_acc: float
    wall_ms: float
    bytes_fwd: int
    bytes_bwd: int


LOG_COLUMNS = ("epoch", "meta_loss", "mean_query_acc", "wall_ms", "bytes_fwd", "bytes_bwd")


def make_outer_state(init: SplitPair, cfg: MetaConfig) -> OptimState:
    if cfg.outer_optimizer == "sgd":
        return OptimState.sgd()
    return OptimState.adam(nncore.concat_params([init.device_params, init.agg_params]))


def meta_train(cfg: MetaConfig, ds: Dataset, init: SplitPair,
               channel_cfg: Optional[ChannelConfig] = None,
               on_epoch: Optional[Callable[[EpochLog], None]] = None,
               traffic: Optional[Traffic] = None) -> Tuple[SplitPair, List[EpochLog]]:
    """Run ``cfg.epochs`` rounds of sample-adapt-evaluate-update.

    Task ``t`` of epoch ``e`` draws its episode and its channel noise from
    streams keyed by ``(seed, e, t)``, so task order never changes results.
    """
    if not cfg.first_order:
        raise NotImplementedError("second-order MAML is not supported; set first_order=true")
    channel_cfg = channel_cfg or ChannelConfig()
    pool = ds.train_classes or ds.class_ids
    optim = make_outer_state(init, cfg)
    logs: List[EpochLog] = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        ep_traffic = Traffic()
        task_rng = derive_rng(cfg.seed, epoch)
        grads, losses, accs = [], [], []
        for t in range(cfg.tasks):
            task = sample_task(pool, cfg.ways, task_rng, t)
            episode = sample_episode(ds, task, cfg.shots, cfg.queries, derive_rng(cfg.seed, epoch, t))
            channels = ChannelPair(channel_cfg, derive_seed(channel_cfg.seed, epoch, t))
            adapted = inner_adapt(init, episode.support_x, episode.support_y, cfg, channels,
                                  traffic=ep_traffic)
            try:
                res = split_loss_and_grads(adapted, episode.query_x, episode.query_y, channels)
            except DeepFadeError as exc:
                log.warning("epoch %d task %d dropped: %s", epoch, t, exc)
                continue
            ep_traffic.add(res.traffic)
            grads.append(nncore.concat_params([res.device_grads, res.agg_grads]))
            losses.append(res.loss)
            accs.append(float(np.mean(res.logits.argmax(1) == episode.query_y)))
        if grads:
            init, optim = meta_update(init, grads, cfg.beta, optim)
        entry = EpochLog(epoch, float(np.sum(losses)), float(np.mean(accs)) if accs else float("nan"),
                         (time.perf_counter() - t0) * 1000.0, ep_traffic.fwd, ep_traffic.bwd)
        logs.append(entry)
        if traffic is not None:
            traffic.add(ep_traffic)
        if on_epoch is not None:
            on_epoch(entry)
    return init, logs


@dataclass
class AdaptationResult:
    curve: List[float]
    final_logits: np.ndarray
    query_losses: np.ndarray
    adapted: SplitPair
    traffic: Traffic = field(default_factory=Traffic)


def meta_test(init: SplitPair, episode: Episode, steps: int, eta: float,
              channels: Optional[ChannelPair] = None) -> AdaptationResult:
    """Adapt on the support set, recording query accuracy before and after each step."""
    channels = channels or ChannelPair(ChannelConfig())
    pair = init.copy()
    traffic = Traffic()

    def evaluate():
        logits = split_predict(pair, episode.query_x, channels, traffic)
        return logits, float(np.mean(logits.argmax(1) == episode.query_y))

    logits, acc = evaluate()
    curve = [acc]
    for _ in range(steps):
        split_sgd_step(pair, episode.support_x, episode.support_y, eta, channels, traffic)
        logits, acc = evaluate()
        curve.append(acc)
    losses = nncore.per_example_ce(logits, episode.query_y)
    return AdaptationResult(curve, logits, losses, pair, traffic)


def write_log_csv(path, logs: Sequence[EpochLog]) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for e in logs:
            w.writerow([e.epoch, repr(e.meta_loss), repr(e.mean_query_acc), f"{e.wall_ms:.3f}",
                        e.bytes_fwd, e.bytes_bwd])
