import io
import json

import numpy as np
import pytest

from corrmeta.checkpoint import Checkpoint
from corrmeta.data import DataError, Dataset, SyntheticSpec, generate_synthetic, split_classes
from corrmeta.engine import (
    MetricSink,
    TrainConfig,
    TrainingError,
    _unique_positions,
    batch_loss,
    evaluate,
    infer,
    lr_at,
    summarize,
    support_prototypes,
    train,
)
from corrmeta.episodes import check_episode_support, sample_episode
from corrmeta.model import ModelConfig, embed_array, episode_forward, init_params
from corrmeta.tensor import Tensor, backward

TINY = ModelConfig.tiny()


@pytest.fixture(scope="module")
def tiny_splits():
    ds = generate_synthetic(SyntheticSpec(n_classes=8, samples_per_class=10, image_size=16, seed=3))
    tr, va, _ = split_classes(ds, (0.5, 0.5, 0.0), seed=0, min_classes=3)
    return tr, va


def _small_cfg(**kw):
    base = dict(episodes_total=16, val_every=8, batch_episodes=8, n_way=3, k_shot=2, q_queries=3, val_episodes=20, chunk=8)
    base.update(kw)
    return TrainConfig(**base)


# episode sampling


def test_episode_geometry():
    ds = generate_synthetic(SyntheticSpec(n_classes=6, samples_per_class=20, image_size=8))
    ep = sample_episode(ds, 5, 5, 15, np.random.default_rng(0))
    assert ep.support_index.shape == (5, 5) and ep.query_index.shape == (5, 15)
    assert ep.support_images(ds).shape == (25, 3, 8, 8)
    assert ep.query_images(ds).shape == (75, 3, 8, 8)
    np.testing.assert_array_equal(ep.query_labels, np.repeat(np.arange(5), 15))
    np.testing.assert_array_equal(ep.support_labels, np.repeat(np.arange(5), 5))


def test_minimal_episode():
    ds = Dataset(["only"], [np.zeros((2, 3, 4, 4), np.float32)], [["a", "b"]], 4)
    ep = sample_episode(ds, 1, 1, 1, np.random.default_rng(0))
    assert sorted([ep.support_index[0, 0], ep.query_index[0, 0]]) == [0, 1]


def test_sampler_determinism():
    ds = generate_synthetic(SyntheticSpec(n_classes=6, samples_per_class=20, image_size=8))
    a = [sample_episode(ds, 5, 5, 10, np.random.default_rng(42)) for _ in range(3)]
    b = [sample_episode(ds, 5, 5, 10, np.random.default_rng(42)) for _ in range(3)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.class_map, y.class_map)
        np.testing.assert_array_equal(x.support_index, y.support_index)
        np.testing.assert_array_equal(x.query_index, y.query_index)


def check_sampler_disjointness(n_episodes=10_000, seed=0):
    """Support/query never share a sample and all samples come from the chosen classes."""
    ds = generate_synthetic(SyntheticSpec(n_classes=7, samples_per_class=21, image_size=4))
    off = ds.offsets
    rng = np.random.default_rng(seed)
    for _ in range(n_episodes):
        ep = sample_episode(ds, 5, 5, 15, rng)
        s, q = ep.support_index.ravel(), ep.query_index.ravel()
        if np.intersect1d(s, q).size or len(np.unique(np.concatenate([s, q]))) != s.size + q.size:
            return False
        if len(set(ep.class_map.tolist())) != 5:
            return False
        for e, c in enumerate(ep.class_map):
            rows = np.concatenate([ep.support_index[e], ep.query_index[e]])
            if rows.min() < off[c] or rows.max() >= off[c + 1]:
                return False
    return True


def test_sampler_disjointness_many_episodes():
    assert check_sampler_disjointness()


def test_sampler_class_coverage():
    ds = generate_synthetic(SyntheticSpec(n_classes=6, samples_per_class=4, image_size=4))
    rng = np.random.default_rng(1)
    counts = np.zeros(6)
    for _ in range(3000):
        counts[sample_episode(ds, 2, 1, 1, rng).class_map] += 1
    # each class is drawn with probability 2/6
    np.testing.assert_allclose(counts / 3000, 1 / 3, atol=0.04)


def test_deficient_class_named():
    ds = Dataset(["big", "small"], [np.zeros((5, 3, 4, 4), np.float32), np.zeros((2, 3, 4, 4), np.float32)],
                 [list("abcde"), list("fg")], 4)
    with pytest.raises(DataError, match="small"):
        check_episode_support(ds, 2, 2, 1)
    with pytest.raises(DataError, match="3-way"):
        sample_episode(ds, 3, 1, 1, np.random.default_rng(0))


# schedule and reporting


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == pytest.approx(1e-3)
    assert lr_at(1999, cfg) == pytest.approx(1e-3)
    assert lr_at(2000, cfg) == pytest.approx(5e-4)
    assert lr_at(4500, cfg) == pytest.approx(2.5e-4)


def test_summarize_examples():
    r = summarize([1.0] * 10)
    assert r.mean_accuracy == 100.0 and r.ci95 == 0.0 and r.episode_count == 10
    r = summarize([1.0, 0.0])
    assert r.mean_accuracy == pytest.approx(50.0)
    assert r.ci95 == pytest.approx(1.96 * np.sqrt(0.5) / np.sqrt(2) * 100, rel=1e-12)
    assert r.ci95 == pytest.approx(98.0, abs=0.01)


def test_summarize_matches_formula(rng):
    for _ in range(50):
        acc = rng.uniform(size=int(rng.integers(2, 200)))
        r = summarize(acc)
        assert r.mean_accuracy == pytest.approx(acc.mean() * 100)
        assert r.ci95 == pytest.approx(1.96 * acc.std(ddof=1) / np.sqrt(acc.size) * 100)
        assert 0.0 <= r.mean_accuracy <= 100.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_episodes=0)
    with pytest.raises(ValueError):
        TrainConfig(val_episodes=1)


# training


def test_batch_loss_is_mean_of_episode_losses(tiny_splits):
    tr, _ = tiny_splits
    params = init_params(TINY, seed=1)
    rng = np.random.default_rng(0)
    eps = [sample_episode(tr, 3, 2, 3, rng) for _ in range(4)]
    pos, uniq = _unique_positions(eps, len(tr))
    z = Tensor(embed_array(tr.flat()[uniq].astype(np.float64), params, TINY))
    loss, vals, _ = batch_loss(z, eps, pos, params, TINY)
    assert loss.item() == pytest.approx(np.mean(vals), abs=1e-6)
    # each episode alone, without the shared table
    for ep, v in zip(eps, vals):
        zs = Tensor(embed_array(ep.support_images(tr).astype(np.float64), params, TINY).reshape(3, 2, -1))
        zq = Tensor(embed_array(ep.query_images(tr).astype(np.float64), params, TINY))
        assert episode_forward(zs, zq, ep.query_labels, params, TINY)[0].item() == pytest.approx(v, abs=1e-10)


def test_two_phase_gradient_matches_direct_backward(tiny_splits):
    from corrmeta.engine import train_step
    from corrmeta.model import embed
    from corrmeta.optim import AdamState

    tr, _ = tiny_splits
    imgs = tr.flat().astype(np.float64)
    rng = np.random.default_rng(5)
    eps = [sample_episode(tr, 3, 2, 3, rng) for _ in range(2)]

    direct = init_params(TINY, seed=2)
    pos, uniq = _unique_positions(eps, len(imgs))
    z = embed(imgs[uniq], direct, TINY)
    direct.zero_grad()
    backward(batch_loss(z, eps, pos, direct, TINY)[0])

    staged = init_params(TINY, seed=2)
    train_step(imgs, eps, staged, TINY, AdamState(), lr=0.0, chunk=3)
    for name in direct:
        np.testing.assert_allclose(staged[name].grad, direct[name].grad, rtol=1e-9, atol=1e-12)


def test_step_count_and_records(tiny_splits):
    tr, va = tiny_splits
    sink = MetricSink()
    ckpt = train(_small_cfg(), tr, va, sink, model_config=TINY)
    steps = [r for r in sink.records if r["split"] == "train"]
    vals = [r for r in sink.records if r["split"] == "val"]
    assert [r["step"] for r in steps] == [8, 16]
    assert [r["step"] for r in vals] == [8, 16]
    assert ckpt.opt_state.step in (1, 2)
    assert ckpt.best_val_accuracy == max(r["accuracy"] for r in vals)
    assert set(sink.records[0]) == set(MetricSink.FIELDS)


def test_partial_final_batch(tiny_splits):
    tr, va = tiny_splits
    sink = MetricSink()
    train(_small_cfg(episodes_total=20, val_every=100), tr, va, sink, model_config=TINY)
    assert [r["step"] for r in sink.records if r["split"] == "train"] == [8, 16, 20]
    assert [r["step"] for r in sink.records if r["split"] == "val"] == [20]


def test_lr_decay_applied_at_crossing_step(tiny_splits):
    tr, va = tiny_splits
    sink = MetricSink()
    train(_small_cfg(episodes_total=32, val_every=100, decay_every=12), tr, va, sink, model_config=TINY)
    lrs = [r["lr"] for r in sink.records if r["split"] == "train"]
    assert lrs == pytest.approx([1e-3, 5e-4, 2.5e-4, 2.5e-4])


def test_metric_stream_is_json_lines(tiny_splits):
    tr, va = tiny_splits
    buf = io.StringIO()
    train(_small_cfg(), tr, va, MetricSink(buf), model_config=TINY)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(rows) == 4 and all(set(r) == set(MetricSink.FIELDS) for r in rows)


def test_training_is_deterministic(tiny_splits):
    tr, va = tiny_splits
    a, b = MetricSink(), MetricSink()
    ca = train(_small_cfg(), tr, va, a, model_config=TINY)
    cb = train(_small_cfg(), tr, va, b, model_config=TINY)
    strip = lambda recs: [{k: v for k, v in r.items() if k != "wall_ms"} for r in recs]
    assert strip(a.records) == strip(b.records)
    for name in ca.params:
        assert ca.params[name].data.tobytes() == cb.params[name].data.tobytes()


def test_non_finite_aborts_with_step(tiny_splits):
    tr, va = tiny_splits
    with pytest.raises(TrainingError, match="episode 8"), np.errstate(over="ignore", invalid="ignore"):
        train(_small_cfg(lr0=1e200), tr, va, model_config=TINY)


def test_overlapping_splits_rejected(tiny_splits):
    tr, _ = tiny_splits
    with pytest.raises(DataError):
        train(_small_cfg(), tr, tr, model_config=TINY)


# evaluation and inference


def _ckpt(seed=0):
    return Checkpoint(model_config=TINY, params=init_params(TINY, seed))


def test_evaluate_is_seeded(tiny_splits):
    _, va = tiny_splits
    ck = _ckpt()
    a = evaluate(ck, va, episodes=30, n=3, k=2, q=3, seed=9)
    b = evaluate(ck, va, episodes=30, n=3, k=2, q=3, seed=9)
    assert a.mean_accuracy == b.mean_accuracy and a.episode_count == 30
    np.testing.assert_array_equal(a.per_episode_accuracies, b.per_episode_accuracies)
    with pytest.raises(ValueError):
        evaluate(ck, va, episodes=1, n=3, k=2, q=3)


def test_infer_self_similarity(tiny_splits):
    tr, _ = tiny_splits
    ck = _ckpt()
    one_shot = Dataset(tr.class_names, [imgs[:1] for imgs in tr.images], [ids[:1] for ids in tr.sample_ids], 16)
    for c in range(one_shot.n_classes):
        res = infer(ck, one_shot, one_shot.images[c][0])
        assert res.label == c and res.class_name == tr.class_names[c]
        assert res.probabilities.sum() == pytest.approx(1.0, abs=1e-6)
        assert res.wall_ms > 0


def test_infer_needs_two_classes(tiny_splits):
    tr, _ = tiny_splits
    with pytest.raises(ValueError):
        support_prototypes(_ckpt(), tr.subset([0], "test"))
