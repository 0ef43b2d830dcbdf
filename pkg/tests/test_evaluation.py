import numpy as np
import pytest
import torch
from pathier import Pathier

from coophash.core import ConfigError, TrainConfig, seeded_rng
from coophash.data import Dataset, make_blob_dataset, make_splits
from coophash.evaluation import (
    ProbeCallback,
    build_index,
    classification_accuracy,
    corrupt_images,
    denoise,
    encode,
    evaluate_retrieval,
    frechet_distance,
    metrics_payload,
    probe_subsets,
    read_curves,
)
from coophash.models import MetricResult
from coophash.nets import build_networks
from coophash.training import TrainState

root = Pathier(__file__).parent

small = TrainConfig(
    bits=8, latent_dim=4, num_classes=3, height=8, width=8, feature_dim=32, embed_dim=4, langevin_steps=2
)


def blobs(per_class: int = 10) -> Dataset:
    return make_blob_dataset(per_class=per_class, num_classes=3, size=8)


def test__encode():
    _, descriptor = build_networks(small, seeded_rng(0))
    dataset = blobs()
    codes = encode(descriptor, dataset.images, batch_size=7)
    assert codes.shape == (30, 8)
    assert np.abs(codes).max() < 1
    with torch.no_grad():
        expected = descriptor.hash(torch.from_numpy(dataset.images)).numpy()
    assert np.allclose(codes, expected, atol=1e-6)
    assert encode(descriptor, dataset.images[:0]).shape == (0, 8)


def test__build_index():
    _, descriptor = build_networks(small, seeded_rng(0))
    dataset = blobs()
    index = build_index(descriptor, dataset)
    assert len(index.ids) == 30
    assert index.bits == 8
    assert index.labels == tuple(frozenset(labels) for labels in dataset.labels)


def test__corrupt_images_gaussian():
    images = np.zeros((4, 1, 8, 8), np.float32)
    corrupted = corrupt_images(images, "gaussian", 0.5, np.random.default_rng(0))
    assert corrupted.shape == images.shape
    assert corrupted.min() >= -1 and corrupted.max() <= 1
    assert np.abs(corrupted).mean() > 0.2
    assert (images == 0).all()
    assert np.array_equal(corrupt_images(images, "gaussian", 0.0, np.random.default_rng(0)), images)


def test__corrupt_images_mask():
    images = np.ones((5, 1, 10, 10), np.float32)
    corrupted = corrupt_images(images, "mask", 0.5, np.random.default_rng(1))
    assert ((corrupted == 0).reshape(5, -1).sum(axis=1) == 25).all()
    assert np.array_equal(corrupt_images(images, "mask", 0.0, np.random.default_rng(1)), images)
    assert (corrupt_images(images, "mask", 2.0, np.random.default_rng(1)) == 0).all()


def test__corrupt_images_errors():
    images = np.zeros((1, 1, 4, 4), np.float32)
    with pytest.raises(ConfigError):
        corrupt_images(images, "blur", 0.5, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        corrupt_images(images, "mask", -0.1, np.random.default_rng(0))


def test__denoise():
    generator, descriptor = build_networks(small, seeded_rng(0))
    images = blobs().images
    restored = denoise(generator, descriptor, images, batch_size=8)
    assert restored.shape == images.shape
    assert restored.dtype == np.float32
    assert restored.min() >= -1 and restored.max() <= 1


def test__classification_accuracy():
    _, descriptor = build_networks(small, seeded_rng(0))
    dataset = blobs()
    accuracy = classification_accuracy(descriptor, dataset)
    assert 0 <= accuracy <= 1
    every_label = Dataset(dataset.images, tuple((0, 1, 2) for _ in range(len(dataset))))
    assert classification_accuracy(descriptor, every_label) == 1.0
    assert classification_accuracy(descriptor, dataset.subset([])) == 0.0


def test__frechet_distance():
    rng = np.random.default_rng(0)
    features = rng.standard_normal((500, 4))
    assert frechet_distance(features, features) == pytest.approx(0.0, abs=1e-6)
    shifted = features + np.array([3.0, 0.0, 0.0, 0.0])
    assert frechet_distance(features, shifted) == pytest.approx(9.0, rel=1e-6)
    with pytest.raises(ValueError):
        frechet_distance(features[:1], features)


def test__frechet_distance_scaled_gaussians():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((200_000, 2))
    b = 2 * rng.standard_normal((200_000, 2))
    # Tr(I + 4I - 2·2I) summed over both dimensions
    assert frechet_distance(a, b) == pytest.approx(2.0, rel=0.02)


def test__evaluate_retrieval():
    _, descriptor = build_networks(small, seeded_rng(0))
    dataset = make_splits(blobs(20), {"train": 20, "query": 10, "database": 30}, seed=0)
    queries, database = dataset.split_of("query"), dataset.split_of("database")
    metrics, rankings = evaluate_retrieval(descriptor, queries, database, map_k=5, precision_k=3)
    assert [(metric.metric, metric.k) for metric in metrics] == [("mAP", 5), ("P", 3)]
    assert all(0 <= metric.value <= 1 for metric in metrics)
    assert len(rankings) == 10
    assert all(len(ranking.items) == 5 for ranking in rankings)
    again, _ = evaluate_retrieval(descriptor, queries, database, map_k=5, precision_k=3)
    assert again == metrics


def test__evaluate_retrieval_corrupted_queries():
    generator, descriptor = build_networks(small, seeded_rng(0))
    dataset = make_splits(blobs(20), {"train": 20, "query": 10, "database": 30}, seed=0)
    queries, database = dataset.split_of("query"), dataset.split_of("database")
    first, _ = evaluate_retrieval(
        descriptor, queries, database, 5, generator=generator, corruption="mask", corruption_level=0.5, denoise_queries=True, seed=3
    )
    second, _ = evaluate_retrieval(
        descriptor, queries, database, 5, generator=generator, corruption="mask", corruption_level=0.5, denoise_queries=True, seed=3
    )
    assert first == second
    with pytest.raises(ConfigError):
        evaluate_retrieval(descriptor, queries, database, 5, denoise_queries=True)


def test__probe_subsets():
    dataset = make_splits(blobs(100), {"train": 100, "query": 50, "database": 150}, seed=0)
    queries, database = probe_subsets(dataset, 20, 40)
    assert len(queries) == 20 and len(database) == 40
    assert set(queries.split.tolist()) == {"query"}
    unsplit_queries, unsplit_database = probe_subsets(blobs(), 5, 1000)
    assert len(unsplit_queries) == 5 and len(unsplit_database) == 30


def test__ProbeCallback(tmp_path: Pathier):
    dataset = blobs()
    path = Pathier(tmp_path) / "curves.csv"
    state = TrainState.initial(small)
    probe = ProbeCallback(dataset, dataset, small, path, every=2, k=5, frechet_samples=12)
    probe.on_train_start(state)
    for iteration in range(1, 5):
        state.iteration = iteration
        probe.on_iteration_end(state, None)
    probe.on_train_end(state)
    curves = read_curves(path)
    assert [row["iter"] for row in curves] == [2, 4]
    assert path.read_text().splitlines()[0] == "iter,map,acc,frechet"
    for row in curves:
        assert 0 <= row["map"] <= 1 and 0 <= row["acc"] <= 1
        assert row["frechet"] >= 0

    state.iteration = 5
    resumed = ProbeCallback(dataset, dataset, small, path, every=2, k=5, frechet_samples=12)
    resumed.on_train_start(state)
    resumed.on_train_end(state)
    assert [row["iter"] for row in read_curves(path)] == [2, 4, 5]


def test__metrics_payload():
    metrics = [MetricResult("mAP", 100, 0.75, 10), MetricResult("P", 50, 0.5, 10)]
    payload = metrics_payload(metrics, accuracy=0.9, mode="ood", bits=16)
    assert payload["mAP@100"] == 0.75
    assert payload["P@50"] == 0.5
    assert payload["accuracy"] == 0.9
    assert payload["mode"] == "ood"
    assert payload["metrics"][0] == {"metric": "mAP", "k": 100, "value": 0.75, "n_queries": 10}
    assert "accuracy" not in metrics_payload(metrics)
