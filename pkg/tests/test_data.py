import gzip
import struct

import numpy as np
import pytest
from pathier import Pathier
from PIL import Image

from coophash.core import DatasetError, LabelError
from coophash.data import (
    Dataset,
    LabelSampler,
    assemble_real_triplets,
    batch_indices,
    iter_batches,
    load_dataset,
    load_idx,
    load_png_dir,
    make_blob_dataset,
    make_splits,
    rescale_bytes,
    sample_negative_label,
)

root = Pathier(__file__).parent

PIXELS = np.arange(4 * 2 * 3, dtype=np.uint8).reshape(4, 2, 3) * 10
LABELS = np.array([3, 1, 4, 1], dtype=np.uint8)


def write_idx(directory: Pathier, pixels: np.ndarray = PIXELS, labels: np.ndarray = LABELS, gz: bool = False):
    count, rows, cols = pixels.shape
    images = struct.pack(">IIII", 0x803, count, rows, cols) + pixels.tobytes()
    label_bytes = struct.pack(">II", 0x801, len(labels)) + labels.tobytes()
    suffix = ".gz" if gz else ""
    images_path = directory / f"train-images-idx3-ubyte{suffix}"
    labels_path = directory / f"train-labels-idx1-ubyte{suffix}"
    if gz:
        images_path.write_bytes(gzip.compress(images))
        labels_path.write_bytes(gzip.compress(label_bytes))
    else:
        images_path.write_bytes(images)
        labels_path.write_bytes(label_bytes)
    return images_path, labels_path


def test__rescale_bytes():
    assert rescale_bytes(np.array([0, 255], dtype=np.uint8)).tolist() == [-1.0, 1.0]


def test__load_idx(tmp_path: Pathier):
    dataset = load_idx(*write_idx(Pathier(tmp_path)))
    assert len(dataset) == 4
    assert dataset.image_shape == (1, 2, 3)
    assert dataset.images.dtype == np.float32
    assert dataset.images[0, 0, 0, 0] == pytest.approx(PIXELS[0, 0, 0] / 127.5 - 1)
    assert dataset.images[2, 0, 1, 2] == pytest.approx(PIXELS[2, 1, 2] / 127.5 - 1)
    assert dataset.labels == ((3,), (1,), (4,), (1,))


def test__load_idx_gzip(tmp_path: Pathier):
    dataset = load_idx(*write_idx(Pathier(tmp_path), gz=True))
    assert dataset.labels[0] == (3,)


def test__load_idx_errors(tmp_path: Pathier):
    tmp = Pathier(tmp_path)
    images_path, labels_path = write_idx(tmp, labels=LABELS[:3])
    with pytest.raises(DatasetError, match="3 labels"):
        load_idx(images_path, labels_path)
    images_path.write_bytes(struct.pack(">IIII", 0x801, 4, 2, 3))
    with pytest.raises(DatasetError, match="Malformed header"):
        load_idx(images_path, labels_path)
    images_path, labels_path = write_idx(tmp)
    images_path.write_bytes(images_path.read_bytes()[:-1])
    with pytest.raises(DatasetError, match="truncated"):
        load_idx(images_path, labels_path)


def test__load_dataset_idx_directory(tmp_path: Pathier):
    write_idx(Pathier(tmp_path))
    assert len(load_dataset(tmp_path, "idx")) == 4
    with pytest.raises(DatasetError, match="Unrecognized"):
        load_dataset(tmp_path, "csv")


def write_png_dir(directory: Pathier, rows: list[tuple[str, str]], size: int = 4, mode: str = "L"):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    for filename, _ in rows:
        shape = (size, size) if mode == "L" else (size, size, 3)
        Image.fromarray(rng.integers(0, 256, shape, dtype=np.uint8)).save(directory / filename)
    lines = ["filename,label"] + [f"{filename},{label}" for filename, label in rows]
    (directory / "labels.csv").write_text("\n".join(lines) + "\n")


def test__load_png_dir(tmp_path: Pathier):
    directory = Pathier(tmp_path) / "pngs"
    write_png_dir(directory, [("b.png", "2"), ("a.png", "0;3"), ("c.png", "1")])
    dataset = load_png_dir(directory)
    assert len(dataset) == 3
    assert dataset.image_shape == (1, 4, 4)
    assert dataset.labels == ((0, 3), (2,), (1,))
    assert dataset.is_multilabel
    with Image.open(directory / "a.png") as image:
        expected = np.asarray(image, dtype=np.uint8)[0, 0] / 127.5 - 1
    assert dataset.images[0, 0, 0, 0] == pytest.approx(expected)


def test__load_png_dir_rgb(tmp_path: Pathier):
    directory = Pathier(tmp_path) / "rgb"
    write_png_dir(directory, [("a.png", "0"), ("b.png", "1")], mode="RGB")
    assert load_png_dir(directory).image_shape == (3, 4, 4)


def test__load_png_dir_missing_file(tmp_path: Pathier):
    directory = Pathier(tmp_path) / "pngs"
    write_png_dir(directory, [("a.png", "0")])
    (directory / "labels.csv").write_text("filename,label\na.png,0\nghost.png,1\n")
    with pytest.raises(DatasetError, match="ghost.png"):
        load_png_dir(directory)


def test__load_png_dir_empty(tmp_path: Pathier):
    directory = Pathier(tmp_path) / "empty"
    directory.mkdir()
    with pytest.raises(DatasetError, match="no items"):
        load_png_dir(directory)


def test__Dataset_validation():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 1, 2, 2), np.float32), ((0,),))
    with pytest.raises(LabelError):
        Dataset(np.zeros((1, 1, 2, 2), np.float32), ((-1,),))


def balanced(num_classes: int, per_class: int) -> Dataset:
    labels = tuple((label,) for label in np.repeat(np.arange(num_classes), per_class).tolist())
    return Dataset(np.zeros((len(labels), 1, 2, 2), np.float32), labels)


def test__make_splits_partition():
    dataset = balanced(4, 25)
    split = make_splits(dataset, {"train": 40, "query": 20, "database": 40}, seed=1)
    names, counts = np.unique(split.split, return_counts=True)
    assert dict(zip(names.tolist(), counts.tolist())) == {"train": 40, "query": 20, "database": 40}
    assert np.array_equal(split.ids, dataset.ids)


def test__make_splits_deterministic():
    dataset = balanced(5, 30)
    sizes = {"train": 50, "query": 20, "database": 60}
    assert np.array_equal(make_splits(dataset, sizes, 7).split, make_splits(dataset, sizes, 7).split)
    assert not np.array_equal(make_splits(dataset, sizes, 7).split, make_splits(dataset, sizes, 8).split)


def test__make_splits_stratified():
    split = make_splits(balanced(10, 300), {"train": 1000, "query": 500, "database": 1000}, seed=0)
    train = split.split_of("train")
    _, counts = np.unique(train.primary_labels, return_counts=True)
    assert counts.tolist() == [100] * 10


def test__make_splits_too_large():
    with pytest.raises(DatasetError):
        make_splits(balanced(2, 5), {"train": 8, "query": 2, "database": 2}, seed=0)


def test__sample_negative_label_two_labels():
    sampler = LabelSampler.from_labels(np.array([0, 1, 1, 0, 1]))
    rng = np.random.default_rng(0)
    assert all(sample_negative_label(sampler, 0, rng) == 1 for _ in range(200))
    assert (sampler.sample_negatives(np.zeros(500, np.int64), rng) == 1).all()


def test__sample_negative_label_uniform():
    sampler = LabelSampler.from_labels(np.repeat(np.arange(10), 50))
    draws = sampler.sample_negatives(np.zeros(100_000, np.int64), np.random.default_rng(1))
    counts = np.bincount(draws, minlength=10)
    assert counts[0] == 0
    expected = 100_000 / 9
    sigma = np.sqrt(100_000 * (1 / 9) * (8 / 9))
    assert (np.abs(counts[1:] - expected) < 4 * sigma).all()


def test__sample_negative_label_skewed():
    sampler = LabelSampler(np.array([0, 1, 2]), np.array([0.7, 0.2, 0.1]))
    assert sampler.negative_probs(0).tolist() == pytest.approx([0.0, 2 / 3, 1 / 3])
    draws = sampler.sample_negatives(np.zeros(100_000, np.int64), np.random.default_rng(2))
    counts = np.bincount(draws, minlength=3)
    assert counts[1] / counts[2] == pytest.approx(2.0, rel=0.05)


def test__LabelSampler_single_label():
    sampler = LabelSampler.from_labels(np.array([4, 4]))
    with pytest.raises(LabelError):
        sampler.negative_probs(4)


def test__batch_indices():
    first = batch_indices(100, 32, seed=0, iteration=0)
    assert len(first) == 32
    assert np.array_equal(first, batch_indices(100, 32, seed=0, iteration=0))
    epoch = np.concatenate([batch_indices(100, 32, 0, i) for i in range(3)])
    assert len(np.unique(epoch)) == 96
    assert not np.array_equal(batch_indices(100, 32, 0, 3), first)


def test__batch_indices_mix_labels():
    labels = np.r_[np.zeros(190, np.int64), np.ones(10, np.int64)]
    for iteration in range(200):
        indices = batch_indices(200, 16, 0, iteration, labels)
        assert len(indices) == 16
        assert len(np.unique(indices)) == 16
        assert len(np.unique(labels[indices])) == 2
        assert np.array_equal(indices, batch_indices(200, 16, 0, iteration, labels))
    balanced = np.arange(100) % 2
    for iteration in range(50):
        indices = batch_indices(100, 3, 1, iteration, balanced)
        assert len(np.unique(balanced[indices])) == 2
        plain = batch_indices(100, 3, 1, iteration)
        if len(np.unique(balanced[plain])) == 2:
            assert np.array_equal(indices, plain)


def test__batch_indices_label_errors():
    with pytest.raises(DatasetError, match="same one"):
        batch_indices(10, 4, 0, 0, np.zeros(10, np.int64))
    with pytest.raises(DatasetError, match="at least 2 items"):
        batch_indices(10, 1, 0, 0, np.arange(10))


def test__iter_batches():
    batches = iter_batches(50, 10, seed=3, start_iteration=7)
    iteration, indices = next(batches)
    assert iteration == 7
    assert np.array_equal(indices, batch_indices(50, 10, 3, 7))
    assert next(batches)[0] == 8


def test__assemble_real_triplets():
    labels = np.array([0, 0, 1, 1, 2, 0])
    positives, negatives = assemble_real_triplets(labels, np.random.default_rng(0))
    for anchor, (positive, negative) in enumerate(zip(positives, negatives)):
        assert labels[positive] == labels[anchor]
        assert labels[negative] != labels[anchor]
    assert positives[4] == 4
    with pytest.raises(DatasetError):
        assemble_real_triplets(np.array([1, 1]), np.random.default_rng(0))


def test__conditioning_labels_multilabel():
    dataset = Dataset(np.zeros((2, 1, 2, 2), np.float32), ((0, 5), (2,)))
    drawn = {int(dataset.conditioning_labels(np.array([0]), np.random.default_rng(seed))[0]) for seed in range(50)}
    assert drawn == {0, 5}


def test__conditioning_labels_keep_two_classes():
    dataset = Dataset(np.zeros((3, 1, 2, 2), np.float32), ((0, 5), (0,), (0, 5)))
    for seed in range(50):
        labels = dataset.conditioning_labels(np.array([0, 1, 2]), np.random.default_rng(seed))
        assert set(labels.tolist()) == {0, 5}
    assert dataset.conditioning_labels(np.array([1]), np.random.default_rng(0)).tolist() == [0]


def test__conform():
    rng = np.random.default_rng(0)
    dataset = Dataset(rng.uniform(-1, 1, (3, 3, 32, 32)).astype(np.float32), ((0,), (1,), (0,)))
    conformed = dataset.conform((1, 28, 28))
    assert conformed.image_shape == (1, 28, 28)
    assert conformed.images.min() >= -1 and conformed.images.max() <= 1
    assert conformed.labels == dataset.labels
    assert dataset.conform((3, 32, 32)) is dataset
    gray = Dataset(np.zeros((1, 1, 8, 8), np.float32), ((0,),))
    assert gray.conform((3, 8, 8)).image_shape == (3, 8, 8)


def test__make_blob_dataset():
    dataset = make_blob_dataset(per_class=20, num_classes=3, size=8)
    assert len(dataset) == 60
    assert dataset.image_shape == (1, 8, 8)
    assert dataset.num_classes == 3
    assert dataset.images.min() >= -1 and dataset.images.max() <= 1
