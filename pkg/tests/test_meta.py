import numpy as np
import pytest

from metasplit import meta, nncore, splitnet
from metasplit.channel import ChannelConfig, ChannelPair, identity_channel
from metasplit.meta import MetaConfig
from metasplit.nncore import ConfigError


def tiny_cfg(**kw):
    base = dict(tasks=2, ways=3, shots=2, queries=3, eta=0.05, beta=0.01, epochs=2)
    base.update(kw)
    return MetaConfig(**base)


def mono_sgd(params, cfg, x, y, lr):
    trace = nncore.forward(params, cfg, x)
    loss, g = nncore.loss_softmax_ce(trace.logits, y)
    grads, _ = nncore.backward(params, cfg, trace, g)
    return nncore.sgd_step(params, grads, lr), grads


def test_config_validation():
    with pytest.raises(ConfigError):
        MetaConfig(shots=21, images_per_class=20)
    with pytest.raises(ConfigError):
        MetaConfig(ways=1)


def test_episode_sizes_and_labels(small_ds, rng):
    task = meta.sample_task(small_ds.train_classes, 5, rng)
    ep = meta.sample_episode(small_ds, task, 5, 15, rng)
    assert ep.support_x.shape == (25, 1, 28, 28) and ep.query_x.shape == (75, 1, 28, 28)
    assert list(np.bincount(ep.support_y)) == [5] * 5 and list(np.bincount(ep.query_y)) == [15] * 5
    assert len(set(task.classes)) == 5


def test_episode_support_and_query_disjoint(small_ds, rng):
    task = meta.sample_task(small_ds.train_classes, 3, rng)
    ep = meta.sample_episode(small_ds, task, 5, 15, rng)
    for label in range(3):
        s = ep.support_x[ep.support_y == label].reshape(5, -1)
        q = ep.query_x[ep.query_y == label].reshape(15, -1)
        assert not any((s[:, None] == q[None]).all(-1).any(1))


def test_episode_whole_class(small_ds, rng):
    task = meta.sample_task(small_ds.train_classes, 2, rng)
    ep = meta.sample_episode(small_ds, task, 20, 0, rng)
    assert len(ep.support_x) == 40 and len(ep.query_x) == 0


def test_episode_ten_way_five_shot():
    ds = __import__("metasplit.data", fromlist=["x"]).Dataset(
        {f"c{i}": np.zeros((20, 1, 28, 28), np.float32) for i in range(12)})
    r = np.random.default_rng(0)
    ep = meta.sample_episode(ds, meta.sample_task(list(ds.classes), 10, r), 5, 0, r)
    assert len(ep.support_y) == 50


def test_episode_insufficient_images_names_class(small_ds, rng):
    task = meta.sample_task(small_ds.train_classes, 2, rng)
    with pytest.raises(ConfigError, match=task.classes[0]):
        meta.sample_episode(small_ds, task, 10, 15, rng)


def test_episode_deterministic(small_ds):
    eps = []
    for _ in range(2):
        r = meta.derive_rng(4, 2)
        eps.append(meta.sample_episode(small_ds, meta.sample_task(small_ds.train_classes, 3, r), 2, 3, r))
    assert eps[0].task == eps[1].task and np.array_equal(eps[0].query_x, eps[1].query_x)


def test_inner_adapt_zero_lr_and_isolation(small_ds, rng):
    pair = splitnet.init_pair(nncore.default_config(3), 2, 0)
    before = pair.checksums()
    ep = meta.sample_episode(small_ds, meta.sample_task(small_ds.train_classes, 3, rng), 2, 3, rng)
    same = meta.inner_adapt(pair, ep.support_x, ep.support_y, tiny_cfg(eta=0.0), identity_channel())
    assert same.checksums() == before
    moved = meta.inner_adapt(pair, ep.support_x, ep.support_y, tiny_cfg(inner_steps=2), identity_channel())
    assert moved.checksums() != before and pair.checksums() == before


@pytest.mark.parametrize("cut", [1, 2, 3])
def test_inner_step_matches_monolithic(small_ds, rng, cut):
    cfg = nncore.default_config(3)
    params = nncore.init_params(cfg, 1)
    pair = splitnet.split_at(cfg, params, splitnet.CutPoint(cut))
    ep = meta.sample_episode(small_ds, meta.sample_task(small_ds.train_classes, 3, rng), 2, 3, rng)
    adapted = meta.inner_adapt(pair, ep.support_x, ep.support_y, tiny_cfg(), identity_channel())
    expected, _ = mono_sgd(params, cfg, ep.support_x, ep.support_y, 0.05)
    got = adapted.joined()[1]
    for k in expected:
        np.testing.assert_allclose(got[k], expected[k], atol=1e-6, rtol=0, err_msg=k)


def test_meta_train_matches_monolithic_fomaml(small_ds):
    """Whole MSL pipeline vs first-order MAML written directly on the joined model."""
    mc = tiny_cfg(epochs=3)
    cfg = nncore.default_config(3)
    init = splitnet.init_pair(cfg, 2, 0)
    trained, logs = meta.meta_train(mc, small_ds, init)

    params = init.joined()[1]
    state = nncore.OptimState.adam(params)
    for epoch in range(1, mc.epochs + 1):
        task_rng = meta.derive_rng(mc.seed, epoch)
        total, loss_sum = None, 0.0
        for t in range(mc.tasks):
            task = meta.sample_task(small_ds.train_classes, mc.ways, task_rng, t)
            ep = meta.sample_episode(small_ds, task, mc.shots, mc.queries, meta.derive_rng(mc.seed, epoch, t))
            adapted, _ = mono_sgd(params, cfg, ep.support_x, ep.support_y, mc.eta)
            trace = nncore.forward(adapted, cfg, ep.query_x)
            loss, g = nncore.loss_softmax_ce(trace.logits, ep.query_y)
            grads, _ = nncore.backward(adapted, cfg, trace, g)
            loss_sum += loss
            total = grads if total is None else {k: total[k] + grads[k] for k in total}
        params, state = nncore.adam_step(params, total, mc.beta, state)
        assert logs[epoch - 1].meta_loss == pytest.approx(loss_sum, abs=1e-5)
    got = trained.joined()[1]
    for k in params:
        np.testing.assert_allclose(got[k], params[k], atol=1e-6, rtol=0, err_msg=k)


def test_meta_train_zero_epochs_returns_init(small_ds):
    init = splitnet.init_pair(nncore.default_config(3), 3, 0)
    out, logs = meta.meta_train(tiny_cfg(epochs=0), small_ds, init)
    assert logs == [] and out.checksums() == init.checksums()


def test_meta_train_deterministic(small_ds):
    init = splitnet.init_pair(nncore.default_config(3), 3, 0)
    a, la = meta.meta_train(tiny_cfg(), small_ds, init)
    b, lb = meta.meta_train(tiny_cfg(), small_ds, init)
    assert a.checksums() == b.checksums()
    assert [x.meta_loss for x in la] == [x.meta_loss for x in lb]


def test_meta_train_noisy_channel_deterministic(small_ds):
    init = splitnet.init_pair(nncore.default_config(3), 3, 0)
    ch = ChannelConfig(snr_db=10.0, fading=True, seed=3)
    a, _ = meta.meta_train(tiny_cfg(), small_ds, init, ch)
    b, _ = meta.meta_train(tiny_cfg(), small_ds, init, ch)
    c, _ = meta.meta_train(tiny_cfg(), small_ds, init)
    assert a.checksums() == b.checksums() != c.checksums()


def test_meta_train_traffic_accounting(small_ds):
    init = splitnet.init_pair(nncore.default_config(3), 3, 0)
    _, logs = meta.meta_train(tiny_cfg(epochs=1), small_ds, init)
    # per task: one support pass (6 images) and one query pass (9 images) each way
    per_image = splitnet.smashed_payload_bytes(splitnet.CutPoint(3), 1)
    assert logs[0].bytes_fwd == logs[0].bytes_bwd == 2 * (6 + 9) * per_image


def test_second_order_not_supported(small_ds):
    init = splitnet.init_pair(nncore.default_config(3), 3, 0)
    with pytest.raises(NotImplementedError):
        meta.meta_train(tiny_cfg(first_order=False), small_ds, init)


def test_meta_loss_single_task_and_additivity(small_ds, rng):
    pair = splitnet.init_pair(nncore.default_config(3), 2, 0)
    eps = [meta.sample_episode(small_ds, meta.sample_task(small_ds.train_classes, 3, rng), 2, 3, rng)
           for _ in range(3)]
    singles = [meta.meta_loss([pair], [e]) for e in eps]
    direct = nncore.loss_softmax_ce(meta.split_predict(pair, eps[0].query_x), eps[0].query_y)[0]
    assert singles[0] == pytest.approx(direct)
    assert meta.meta_loss([pair] * 3, eps) == pytest.approx(sum(singles))


def test_sum_grads_linear(rng):
    g = {"a": rng.normal(size=(2, 2)), "b": rng.normal(size=3)}
    total = meta.sum_grads([g] * 4)
    for k in g:
        np.testing.assert_allclose(total[k], 4 * g[k])


def test_meta_update_zero_grads_unchanged():
    init = splitnet.init_pair(nncore.default_config(3), 2, 0)
    zeros = {k: np.zeros_like(v) for k, v in init.joined()[1].items()}
    out, _ = meta.meta_update(init, [zeros, zeros], 0.01, meta.make_outer_state(init, tiny_cfg()))
    assert out.checksums() == init.checksums()


def test_meta_test_curve(small_ds, rng):
    init = splitnet.init_pair(nncore.default_config(3), 3, 0)
    ep = meta.sample_episode(small_ds, meta.sample_task(small_ds.test_classes, 3, rng), 5, 5, rng)
    res = meta.meta_test(init, ep, 4, 0.1)
    assert len(res.curve) == 5 and res.adapted.checksums() != init.checksums()
    assert res.curve[0] == float(np.mean(meta.split_predict(init, ep.query_x).argmax(1) == ep.query_y))
    zero = meta.meta_test(init, ep, 3, 0.0)
    assert len(set(zero.curve)) == 1


def test_log_csv(tmp_path, small_ds):
    init = splitnet.init_pair(nncore.default_config(3), 3, 0)
    _, logs = meta.meta_train(tiny_cfg(), small_ds, init)
    path = tmp_path / "log.csv"
    meta.write_log_csv(path, logs)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(meta.LOG_COLUMNS) and len(lines) == 3
