import numpy as np
import pytest
from dataclasses import replace

from parexch import Model, Schedule, TrainConfig, make_synthetic, sequential_reference, train, train_bsp, train_easgd
from parexch.errors import ConfigError, WorkerPanic
from parexch.models import _one_hot
from parexch.pipeline import BatchReader, write_dataset
from parexch.trainers import elastic_center_update, elastic_worker_update, shard_dataset, weight_hash

MODELS = [Model("linear", 6, 3), Model("logistic", 6, 3), Model("mlp", 6, 3, hidden=5)]


@pytest.fixture(scope="module")
def data():
    return make_synthetic(0, 256, 6, 3, difficulty=0.3)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(mode="async")
    with pytest.raises(ConfigError):
        TrainConfig(workers=0)
    with pytest.raises(ConfigError):
        TrainConfig(alpha=0.0)
    with pytest.raises(ValueError):
        TrainConfig(strategy="ring")
    assert TrainConfig(batch_size=128, workers=8).effective_batch == 1024


def test_sharding_is_round_robin():
    assert shard_dataset(10, 3, 1) == [1, 4, 7]
    assert shard_dataset(["a", "b", "c", "d"], 2, 0) == ["a", "c"]
    shards = [shard_dataset(100, 4, r) for r in range(4)]
    assert sorted(sum(shards, [])) == list(range(100))


@pytest.mark.parametrize("k", [2, 4, 8])
def test_awagd_with_scaled_lr_tracks_subgd(data, k):
    base = TrainConfig(workers=k, batch_size=8, lr=0.05, precision="f64", max_iterations=20,
                       epochs=20, record_weights=True)
    sub = train_bsp(replace(base, scheme="subgd"), MODELS[2], data)
    # the trainer multiplies the AWAGD rate by k itself
    awa = train_bsp(replace(base, scheme="awagd"), MODELS[2], data)
    assert len(sub[0].trajectory) == 20
    for a, b in zip(sub[0].trajectory, awa[0].trajectory):
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.kind)
@pytest.mark.parametrize("strategy", ["ar", "asa"])
def test_subgd_equals_large_batch_sgd(data, model, strategy):
    k, b, lr = 4, 8, 0.05
    cfg = TrainConfig(workers=k, batch_size=b, lr=lr, strategy=strategy, precision="f64", record_weights=True)
    dist = train_bsp(cfg, model, data)
    ref = sequential_reference(replace(cfg, batch_size=k * b, lr=k * lr), model, data)
    assert len(ref.trajectory) == len(dist[0].trajectory) == 256 // (k * b)
    for a, r in zip(dist[0].trajectory, ref.trajectory):
        np.testing.assert_allclose(a, r, rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("strategy", ["ar", "asa", "asa16"])
def test_bsp_ranks_stay_in_lockstep(data, strategy):
    cfg = TrainConfig(workers=4, batch_size=4, lr=0.05, strategy=strategy, epochs=20, max_iterations=60,
                      momentum=0.9)
    stats = train_bsp(cfg, MODELS[1], data)
    assert all(s.iterations == 60 for s in stats)
    for s in stats[1:]:
        assert s.hashes() == stats[0].hashes()
    assert stats[0].losses()[-1] < stats[0].losses()[0]


def test_bsp_records_exchange_bytes(data):
    model = MODELS[0]
    stats = train_bsp(TrainConfig(workers=4, batch_size=8, strategy="asa", max_iterations=3), model, data)
    per_iter = 2 * 3 * -(-model.num_params // 4) * 4
    assert [r.bytes_sent for r in stats[1].records] == [per_iter] * 3


@pytest.mark.parametrize("mode,scheme,strategy", [(m, s, x) for m in ["bsp", "easgd"]
                                                  for s in ["subgd", "awagd"] for x in ["ar", "asa", "asa16"]])
def test_single_worker_matches_sequential_bit_exactly(data, mode, scheme, strategy):
    cfg = TrainConfig(mode=mode, workers=1, batch_size=16, lr=0.05, scheme=scheme, strategy=strategy,
                      momentum=0.5, epochs=2, tau=2)
    got = train(cfg, MODELS[2], data)[0]
    ref = sequential_reference(cfg, MODELS[2], data)
    assert got.iterations == ref.iterations == 32
    assert got.hashes() == ref.hashes()
    assert got.final_weights.tobytes() == ref.final_weights.tobytes()


def test_elastic_updates_pull_together():
    x, c = np.array([2.0]), np.array([0.0])
    assert elastic_worker_update(x, c, 0.5)[0] == 1.0
    assert elastic_center_update(c, x, 0.5)[0] == 1.0
    # alpha = 1 swaps roles entirely
    assert elastic_worker_update(x, c, 1.0)[0] == 0.0


def test_easgd_message_accounting(data):
    k, n, tau = 3, 10, 3
    cfg = TrainConfig(mode="easgd", workers=k, batch_size=4, tau=tau, max_iterations=n, epochs=5)
    stats = train_easgd(cfg, MODELS[0], data)
    workers, server = stats[:-1], stats[-1]
    assert server.role == "server"
    assert all(w.param_messages_sent == n // tau for w in workers)
    total = sum(w.param_messages_sent for w in workers) + server.param_messages_sent
    assert total == 2 * k * (n // tau)


def test_easgd_center_approaches_optimum(data):
    model = MODELS[0]
    x = np.hstack([data.x.astype(np.float64), np.ones((len(data), 1))])
    sol, *_ = np.linalg.lstsq(x, _one_hot(data.y, 3, np.float64), rcond=None)
    best = model.loss(np.concatenate([sol[:-1].ravel(), sol[-1]]), data.as_batch())
    cfg = TrainConfig(mode="easgd", workers=4, batch_size=16, lr=0.1, alpha=0.5, tau=1, epochs=100,
                      max_iterations=300, precision="f64", shuffle=True)
    center = train_easgd(cfg, model, data)[-1].final_weights
    assert model.loss(center, data.as_batch()) - best < 1e-2


def test_validation_and_schedule(data):
    cfg = TrainConfig(workers=2, batch_size=16, lr=0.1, epochs=3, schedule=Schedule("step", 0.5, 1))
    stats = train_bsp(cfg, MODELS[1], data, val=data)
    assert [v["epoch"] for v in stats[0].validation] == [0, 1, 2]
    assert stats[1].validation == []
    assert {r.lr for r in stats[0].records} == {0.1, 0.05, 0.025}
    assert 0 <= stats[0].val_error <= 1


def test_too_little_data_is_a_config_error(data):
    with pytest.raises(WorkerPanic, match="ConfigError"):
        train_bsp(TrainConfig(workers=4, batch_size=100), MODELS[0], data)


def test_weight_hash_is_content_hash():
    a = np.arange(4, dtype=np.float32)
    assert weight_hash(a) == weight_hash(a.copy()) != weight_hash(a + 1)
    assert len(weight_hash(a)) == 32


def test_training_from_batch_files(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, (64, 1, 4, 4), dtype=np.uint8)
    write_dataset(tmp_path, raw, rng.integers(0, 3, 64), batch_size=8)
    reader = BatchReader.open(tmp_path, crop=(3, 3))
    model = Model("logistic", 9, 3)
    stats = train_bsp(TrainConfig(workers=2, lr=0.001, epochs=2), model, reader)
    assert all(s.iterations == 8 for s in stats)
    assert stats[0].hashes() == stats[1].hashes()
