import csv
import gzip
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from pathier import Pathier, Pathish
from PIL import Image
from typing_extensions import Self, Sequence

from .core import DatasetError, LabelError
from .models import LabeledImage

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
SPLITS = ("train", "query", "database")
UNUSED = "unused"


def rescale_bytes(raw: np.ndarray) -> np.ndarray:
    """Map raw bytes `b` to `b / 127.5 - 1` so pixels span `[-1, 1]`."""
    return (raw.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


@dataclass(frozen=True)
class Dataset:
    """
    Images in `[-1, 1]` with one label set per item and a split tag per item.

    `labels[i]` is a tuple of class ids; single-label data has one-element tuples.
    `split[i]` is one of `train`, `query`, `database` or `unused`.
    """

    images: np.ndarray
    labels: tuple[tuple[int, ...], ...]
    split: np.ndarray = field(default_factory=lambda: np.array([], dtype="<U8"))
    ids: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(
                f"Got {len(self.images)} images but {len(self.labels)} labels."
            )
        if not len(self.split):
            object.__setattr__(self, "split", np.full(len(self.images), "train", dtype="<U8"))
        if not len(self.ids):
            object.__setattr__(self, "ids", np.arange(len(self.images), dtype=np.int64))
        if any(not item_labels for item_labels in self.labels):
            raise LabelError("Every item needs at least one label.")
        if any(label < 0 for item_labels in self.labels for label in item_labels):
            raise LabelError("Labels must be non-negative integers.")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> LabeledImage:
        """Item `index` with its primary label."""
        return LabeledImage(self.images[index], self.labels[index][0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore

    @property
    def num_classes(self) -> int:
        return 1 + max(label for item_labels in self.labels for label in item_labels)

    @property
    def is_multilabel(self) -> bool:
        return any(len(item_labels) > 1 for item_labels in self.labels)

    @property
    def primary_labels(self) -> np.ndarray:
        """First label of each item; for single-label data, simply the labels."""
        return np.array([item_labels[0] for item_labels in self.labels], dtype=np.int64)

    @property
    def label_sets(self) -> dict[int, frozenset[int]]:
        return {int(i): frozenset(item_labels) for i, item_labels in zip(self.ids, self.labels)}

    def subset(self, indices: Sequence[int] | np.ndarray) -> Self:
        indices = np.asarray(indices, dtype=np.int64)
        return self.__class__(
            self.images[indices],
            tuple(self.labels[i] for i in indices),
            self.split[indices],
            self.ids[indices],
        )

    def split_of(self, name: str) -> Self:
        """The items tagged `name`."""
        return self.subset(np.flatnonzero(self.split == name))

    def conditioning_labels(self, indices: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """
        One label per item; multi-label items contribute a uniformly chosen member of their set.

        If the draws all agree but the items' label sets don't, the first item holding another label
        is conditioned on that label instead.
        """
        if not self.is_multilabel:
            return self.primary_labels[indices]
        labels = np.array(
            [self.labels[i][rng.integers(len(self.labels[i]))] for i in indices], dtype=np.int64
        )
        if len(labels) < 2 or len(np.unique(labels)) > 1:
            return labels
        for position, i in enumerate(indices):
            others = [label for label in self.labels[i] if label != labels[0]]
            if others:
                labels[position] = others[0]
                break
        return labels

    def conform(self, image_shape: Sequence[int]) -> Self:
        """
        Match `image_shape` by averaging or repeating channels and bilinear resizing.

        Used when retrieval data comes from a different source than the training data.
        """
        channels, height, width = image_shape
        if self.image_shape == tuple(image_shape):
            return self
        images = torch.from_numpy(self.images)
        if images.shape[1] != channels:
            if channels == 1:
                images = images.mean(dim=1, keepdim=True)
            elif images.shape[1] == 1:
                images = images.repeat(1, channels, 1, 1)
            else:
                raise DatasetError(
                    f"Can't convert {images.shape[1]}-channel images to {channels} channels."
                )
        if tuple(images.shape[2:]) != (height, width):
            images = F.interpolate(
                images, size=(height, width), mode="bilinear", align_corners=False
            )
        images = images.clamp(-1.0, 1.0).numpy().astype(np.float32)
        return self.__class__(images, self.labels, self.split, self.ids)


class LabelSampler:
    """Empirical label distribution `p_data(c)` over a training split."""

    def __init__(self, classes: np.ndarray, probs: np.ndarray):
        self.classes = np.asarray(classes, dtype=np.int64)
        self.probs = np.asarray(probs, dtype=np.float64)

    @classmethod
    def from_labels(cls, labels: Sequence[Sequence[int]] | np.ndarray) -> Self:
        """Histogram of every label occurrence in `labels` (a label array or a sequence of label sets)."""
        flat = np.array(
            [
                label
                for item in labels
                for label in (item if isinstance(item, (tuple, list)) else (item,))
            ],
            dtype=np.int64,
        )
        if not len(flat):
            raise DatasetError("Can't build a label sampler from no labels.")
        classes, counts = np.unique(flat, return_counts=True)
        return cls(classes, counts / counts.sum())

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> Self:
        return cls.from_labels(dataset.labels)

    @property
    def support_size(self) -> int:
        return len(self.classes)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(self.classes, size=count, p=self.probs)

    def negative_probs(self, exclude: int) -> np.ndarray:
        """The histogram renormalized after removing `exclude`."""
        if self.support_size < 2:
            raise LabelError("Drawing a different label needs at least 2 labels in the support.")
        probs = np.where(self.classes == exclude, 0.0, self.probs)
        return probs / probs.sum()

    def sample_negatives(self, excludes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One draw per entry of `excludes`, never equal to that entry."""
        excludes = np.asarray(excludes, dtype=np.int64)
        draws = np.empty(len(excludes), dtype=np.int64)
        for exclude in np.unique(excludes):
            slots = np.flatnonzero(excludes == exclude)
            draws[slots] = rng.choice(
                self.classes, size=len(slots), p=self.negative_probs(int(exclude))
            )
        return draws


def sample_negative_label(sampler: LabelSampler, exclude: int, rng: np.random.Generator) -> int:
    return int(rng.choice(sampler.classes, p=sampler.negative_probs(exclude)))


def _open(path: Pathier) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as file:
            return file.read()
    return path.read_bytes()


def load_idx(images_path: Pathish, labels_path: Pathish) -> Dataset:
    """Read an IDX image file (magic 0x00000803) and its IDX label file (magic 0x00000801)."""
    images_path, labels_path = Pathier(images_path), Pathier(labels_path)
    image_bytes = _open(images_path)
    label_bytes = _open(labels_path)
    if len(image_bytes) < 16:
        raise DatasetError(f"Malformed header in `{images_path}`.")
    magic, count, rows, cols = struct.unpack(">IIII", image_bytes[:16])
    if magic != IMAGES_MAGIC:
        raise DatasetError(f"Malformed header in `{images_path}`: magic {magic:#010x}.")
    if len(label_bytes) < 8:
        raise DatasetError(f"Malformed header in `{labels_path}`.")
    label_magic, label_count = struct.unpack(">II", label_bytes[:8])
    if label_magic != LABELS_MAGIC:
        raise DatasetError(f"Malformed header in `{labels_path}`: magic {label_magic:#010x}.")
    if label_count != count:
        raise DatasetError(
            f"`{images_path.name}` holds {count} images but `{labels_path.name}` holds {label_count} labels."
        )
    pixels = np.frombuffer(image_bytes, dtype=np.uint8, offset=16)
    if pixels.size != count * rows * cols:
        raise DatasetError(f"`{images_path}` is truncated: expected {count * rows * cols} pixel bytes.")
    labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=8)
    if labels.size != count:
        raise DatasetError(f"`{labels_path}` is truncated: expected {count} labels.")
    if not count:
        raise DatasetError(f"`{images_path}` has no items.")
    images = rescale_bytes(pixels.reshape(count, 1, rows, cols))
    return Dataset(images, tuple((int(label),) for label in labels))


def _find_one(directory: Pathier, patterns: Sequence[str]) -> Pathier:
    matches = sorted({file for pattern in patterns for file in directory.glob(pattern)})
    if len(matches) != 1:
        raise DatasetError(
            f"Expected exactly one file matching {list(patterns)} in `{directory}`, found {len(matches)}."
        )
    return Pathier(matches[0])


def _parse_label(raw: str, row: int) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in raw.split(";") if part.strip())
    except ValueError as e:
        raise DatasetError(f"labels.csv row {row}: `{raw}` is not an integer label.") from e


def load_png_dir(directory: Pathish) -> Dataset:
    """
    Read a directory of images described by `labels.csv` (header `filename,label`).

    Labels may be `;`-separated for multi-label items.
    Items are ordered by filename.
    """
    directory = Pathier(directory)
    if not any(directory.iterdir()):
        raise DatasetError(f"`{directory}` has no items.")
    labels_file = directory / "labels.csv"
    if not labels_file.exists():
        raise DatasetError(f"`{directory}` has no labels.csv.")
    with labels_file.open(encoding="utf-8", newline="") as file:
        reader = csv.DictReader(file)
        if reader.fieldnames is None or not {"filename", "label"} <= set(reader.fieldnames):
            raise DatasetError("labels.csv must have a `filename,label` header.")
        rows = [
            (row["filename"], _parse_label(row["label"], i))
            for i, row in enumerate(reader, 2)
        ]
    if not rows:
        raise DatasetError(f"`{directory}` has no items.")
    rows.sort(key=lambda row: row[0])
    images: list[np.ndarray] = []
    mode: str | None = None
    for filename, _ in rows:
        path = directory / filename
        if not path.exists():
            raise DatasetError(f"labels.csv names a missing file: `{filename}`.")
        with Image.open(path) as image:
            mode = mode or ("L" if image.mode in ("1", "L", "LA", "P") else "RGB")
            array = np.asarray(image.convert(mode), dtype=np.uint8)
        images.append(array[None] if array.ndim == 2 else array.transpose(2, 0, 1))
    shapes = {image.shape for image in images}
    if len(shapes) != 1:
        raise DatasetError(f"Images in `{directory}` don't share one shape: {sorted(shapes)}.")
    return Dataset(rescale_bytes(np.stack(images)), tuple(labels for _, labels in rows))


def load_dataset(source: Pathish, data_format: str = "idx") -> Dataset:
    """
    Load `source` as either `idx` (a directory holding one `*idx3-ubyte*` and one `*idx1-ubyte*` file)
    or `png-dir` (a directory of images plus `labels.csv`).
    """
    source = Pathier(source)
    if not source.exists():
        raise DatasetError(f"`{source}` does not exist.")
    if data_format == "idx":
        if not source.is_dir():
            raise DatasetError(f"`{source}` should be a directory of IDX files.")
        return load_idx(
            _find_one(source, ["*idx3-ubyte*", "*idx3.ubyte*"]),
            _find_one(source, ["*idx1-ubyte*", "*idx1.ubyte*"]),
        )
    if data_format == "png-dir":
        return load_png_dir(source)
    raise DatasetError(f"Unrecognized dataset format `{data_format}`; use `idx` or `png-dir`.")


def _stratified_quotas(class_counts: dict[int, int], total: int) -> dict[int, int]:
    """Split `total` across classes in proportion to their counts (largest remainder, ties by class id)."""
    n = sum(class_counts.values())
    exact = {label: total * count / n for label, count in class_counts.items()}
    quotas = {label: int(np.floor(value)) for label, value in exact.items()}
    leftover = total - sum(quotas.values())
    order = sorted(exact, key=lambda label: (-(exact[label] - quotas[label]), label))
    for label in order[:leftover]:
        quotas[label] += 1
    return quotas


def make_splits(dataset: Dataset, sizes: dict[str, int], seed: int) -> Dataset:
    """
    Tag items `train`, `query`, `database` (leftovers `unused`) after a seeded shuffle.

    The train split is stratified by each item's first label.
    """
    train, query, database = (int(sizes.get(name, 0)) for name in SPLITS)
    if min(train, query, database) < 0 or train + query + database > len(dataset):
        raise DatasetError(
            f"Split sizes {train}/{query}/{database} don't fit in {len(dataset)} items."
        )
    order = np.random.default_rng(seed).permutation(len(dataset))
    primary = dataset.primary_labels
    counts = {int(label): int(count) for label, count in zip(*np.unique(primary, return_counts=True))}
    quotas = _stratified_quotas(counts, train)
    taken = {label: 0 for label in counts}
    tags = np.full(len(dataset), UNUSED, dtype="<U8")
    rest: list[int] = []
    for index in order:
        label = int(primary[index])
        if taken[label] < quotas[label]:
            tags[index] = "train"
            taken[label] += 1
        else:
            rest.append(int(index))
    tags[rest[:query]] = "query"
    tags[rest[query : query + database]] = "database"
    return Dataset(dataset.images, dataset.labels, tags, dataset.ids)


def _mix_labels(batch: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Swap the last item of a single-label `batch` for a random item of another class."""
    if len(batch) < 2:
        raise DatasetError("A batch needs at least 2 items to hold 2 distinct labels.")
    if len(np.unique(labels[batch])) > 1:
        return batch
    others = np.flatnonzero(labels != labels[batch[0]])
    if not len(others):
        raise DatasetError("Batches need 2 distinct labels but every item has the same one.")
    batch = batch.copy()
    batch[-1] = rng.choice(others)
    return batch


def batch_indices(
    num_items: int,
    batch_size: int,
    seed: int,
    iteration: int,
    labels: np.ndarray | None = None,
) -> np.ndarray:
    """
    Indices of the batch used at `iteration`.

    Each epoch is a fresh permutation seeded by `(seed, epoch)`, so any iteration can be reproduced without replaying earlier ones.
    With `labels` (one per item), a batch that would hold a single class gets its last slot
    swapped for an item of another class, drawn from a stream seeded by `(seed, iteration)`.
    """
    if num_items == 0:
        raise DatasetError("Can't draw batches from an empty dataset.")
    batch_size = min(batch_size, num_items)
    per_epoch = num_items // batch_size
    epoch, offset = divmod(iteration, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(num_items)
    batch = order[offset * batch_size : (offset + 1) * batch_size]
    if labels is None:
        return batch
    return _mix_labels(batch, np.asarray(labels), np.random.default_rng([seed, iteration, 1]))


def iter_batches(
    num_items: int,
    batch_size: int,
    seed: int,
    start_iteration: int = 0,
    labels: np.ndarray | None = None,
) -> Iterator[tuple[int, np.ndarray]]:
    """Endless `(iteration, indices)` pairs starting at `start_iteration`."""
    iteration = start_iteration
    while True:
        yield iteration, batch_indices(num_items, batch_size, seed, iteration, labels)
        iteration += 1


def assemble_real_triplets(
    labels: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """
    For each anchor, a same-label positive and a different-label negative from the same batch.

    Anchors whose class appears once use themselves as the positive.
    """
    labels = np.asarray(labels)
    positives = np.empty(len(labels), dtype=np.int64)
    negatives = np.empty(len(labels), dtype=np.int64)
    for i, label in enumerate(labels):
        same = np.flatnonzero(labels == label)
        same = same[same != i]
        different = np.flatnonzero(labels != label)
        if not len(different):
            raise DatasetError("Triplet assembly needs at least 2 distinct labels in a batch.")
        positives[i] = rng.choice(same) if len(same) else i
        negatives[i] = rng.choice(different)
    return positives, negatives


def make_blob_dataset(
    per_class: int = 200,
    num_classes: int = 2,
    size: int = 8,
    channels: int = 1,
    noise: float = 0.2,
    seed: int = 0,
) -> Dataset:
    """Small synthetic set: one fixed random pattern per class plus Gaussian pixel noise, clipped to `[-1, 1]`."""
    rng = np.random.default_rng(seed)
    patterns = rng.uniform(-0.8, 0.8, size=(num_classes, channels, size, size))
    labels = np.repeat(np.arange(num_classes), per_class)
    images = patterns[labels] + noise * rng.standard_normal((len(labels), channels, size, size))
    return Dataset(
        np.clip(images, -1.0, 1.0).astype(np.float32), tuple((int(label),) for label in labels)
    )
