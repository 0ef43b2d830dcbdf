import numpy as np
import scipy.linalg
import torch
from pathier import Pathier, Pathish
from typing_extensions import Sequence, override

from .core import ConfigError, RandomStreams, TrainConfig
from .data import Dataset
from .mcmc import cooperative_sample
from .models import LossReport, MetricResult, RankingResult
from .nets import Descriptor, Generator, module_device, predict_labels, reconstruct
from .retrieval import HashIndex, LabelRelevance, retrieval_metrics, search_many
from .training import TrainCallback, TrainState

CORRUPTIONS = ("gaussian", "mask")


def _batches(images: np.ndarray, batch_size: int):
    for start in range(0, len(images), batch_size):
        yield torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size]))


@torch.no_grad()
def encode(descriptor: Descriptor, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Real-valued hash head outputs `f_H(x)` for every image, shape `(N, K)`."""
    device = module_device(descriptor)
    codes = [descriptor.hash(batch.to(device)).cpu().numpy() for batch in _batches(images, batch_size)]
    return np.concatenate(codes) if codes else np.empty((0, descriptor.bits), dtype=np.float32)


@torch.no_grad()
def extract_features(descriptor: Descriptor, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Shared base features `f_0(x)`."""
    device = module_device(descriptor)
    return np.concatenate(
        [descriptor.features(batch.to(device)).cpu().numpy() for batch in _batches(images, batch_size)]
    )


@torch.no_grad()
def denoise(
    generator: Generator, descriptor: Descriptor, images: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Replace each image with its reconstruction `g(ĉ, μ(x, ĉ))` under the predicted label `ĉ`."""
    device = module_device(descriptor)
    return np.concatenate(
        [
            reconstruct(generator, descriptor, batch.to(device)).cpu().numpy()
            for batch in _batches(images, batch_size)
        ]
    ).astype(np.float32)


def build_index(descriptor: Descriptor, dataset: Dataset) -> HashIndex:
    return HashIndex.build(encode(descriptor, dataset.images), dataset.ids, dataset.labels)


def corrupt_images(
    images: np.ndarray, kind: str, level: float, rng: np.random.Generator
) -> np.ndarray:
    """
    Degraded copies of `images`.

    `gaussian` adds `N(0, level²)` pixel noise; `mask` fills a random square with side `level·min(H, W)` with zeros.
    Results stay in `[-1, 1]`.
    """
    if kind not in CORRUPTIONS:
        raise ConfigError(f"Unknown corruption `{kind}`; use one of {list(CORRUPTIONS)}.")
    if level < 0:
        raise ConfigError(f"Corruption level must be ≥ 0 (got {level}).")
    images = np.array(images, dtype=np.float32, copy=True)
    if kind == "gaussian":
        images += level * rng.standard_normal(images.shape).astype(np.float32)
        return np.clip(images, -1.0, 1.0)
    height, width = images.shape[2:]
    side = min(int(round(level * min(height, width))), height, width)
    if side == 0:
        return images
    tops = rng.integers(0, height - side + 1, size=len(images))
    lefts = rng.integers(0, width - side + 1, size=len(images))
    for image, top, left in zip(images, tops, lefts):
        image[:, top : top + side, left : left + side] = 0.0
    return images


@torch.no_grad()
def classification_accuracy(descriptor: Descriptor, dataset: Dataset, batch_size: int = 256) -> float:
    """Fraction of items whose predicted class is in their label set."""
    if not len(dataset):
        return 0.0
    device = module_device(descriptor)
    predictions = np.concatenate(
        [predict_labels(descriptor, batch.to(device)).cpu().numpy() for batch in _batches(dataset.images, batch_size)]
    )
    return float(np.mean([int(p) in set(labels) for p, labels in zip(predictions, dataset.labels)]))


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """
    Fréchet distance between Gaussian fits of two feature sets:
    `‖μ_a - μ_b‖² + Tr(Σ_a + Σ_b - 2 (Σ_a Σ_b)^½)`.
    """
    features_a = np.asarray(features_a, dtype=np.float64)
    features_b = np.asarray(features_b, dtype=np.float64)
    if len(features_a) < 2 or len(features_b) < 2:
        raise ValueError("Need at least 2 samples per feature set.")
    mean_a, mean_b = features_a.mean(axis=0), features_b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(features_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(features_b, rowvar=False))
    covmean = scipy.linalg.sqrtm(cov_a @ cov_b)
    if not np.isfinite(covmean).all():
        offset = np.eye(len(cov_a)) * 1e-6
        covmean = scipy.linalg.sqrtm((cov_a + offset) @ (cov_b + offset))
    covmean = np.real(covmean)
    distance = np.sum((mean_a - mean_b) ** 2) + np.trace(cov_a + cov_b - 2 * covmean)
    return float(max(distance, 0.0))


def synthetic_frechet(
    generator: Generator,
    descriptor: Descriptor,
    real: Dataset,
    cfg: TrainConfig,
    seed: int,
) -> float:
    """Fréchet distance between base features of `real` and cooperative samples drawn for the same labels."""
    device = module_device(descriptor)
    streams = RandomStreams.from_seed(seed)
    labels = torch.as_tensor(real.primary_labels, dtype=torch.long, device=device)
    sample = cooperative_sample(labels, generator, descriptor, cfg, streams)
    synthetic = sample.x_tilde.detach().cpu().numpy()
    return frechet_distance(
        extract_features(descriptor, real.images), extract_features(descriptor, synthetic)
    )


def evaluate_retrieval(
    descriptor: Descriptor,
    queries: Dataset,
    database: Dataset,
    map_k: int,
    precision_k: int | None = None,
    generator: Generator | None = None,
    corruption: str | None = None,
    corruption_level: float = 0.0,
    denoise_queries: bool = False,
    seed: int = 0,
) -> tuple[list[MetricResult], list[RankingResult]]:
    """
    Encode both sets, search the database for every query and score the rankings.

    Query ids may collide with database ids; relevance is judged on label sets only.
    With `corruption`, queries are degraded first and, with `denoise_queries`, reconstructed through `generator`.
    """
    precision_k = precision_k or map_k
    query_images = queries.images
    if corruption:
        query_images = corrupt_images(query_images, corruption, corruption_level, np.random.default_rng(seed))
    if denoise_queries:
        if generator is None:
            raise ConfigError("Denoising queries needs a generator.")
        query_images = denoise(generator, descriptor, query_images)
    index = build_index(descriptor, database)
    query_codes = HashIndex.build(encode(descriptor, query_images), queries.ids, queries.labels).codes
    rankings = search_many(index, query_codes, queries.ids, max(map_k, precision_k))
    relevance = LabelRelevance(queries.label_sets, index.label_map)
    return retrieval_metrics(rankings, relevance, map_k, precision_k), rankings


def probe_subsets(dataset: Dataset, query_size: int = 200, database_size: int = 2000) -> tuple[Dataset, Dataset]:
    """
    A small fixed query/database pair for training-time probes.

    Uses the dataset's `query`/`database` splits when present, otherwise the training items themselves.
    """
    queries = dataset.split_of("query")
    database = dataset.split_of("database")
    if not len(queries) or not len(database):
        queries = database = dataset.split_of("train") if len(dataset.split_of("train")) else dataset
    return queries.subset(np.arange(min(query_size, len(queries)))), database.subset(
        np.arange(min(database_size, len(database)))
    )


class ProbeCallback(TrainCallback):
    """
    Every `every` iterations, scores a parameter snapshot on a fixed probe split and appends
    `iter,map,acc,frechet` to `curves.csv`.
    """

    header = "iter,map,acc,frechet"

    def __init__(
        self,
        queries: Dataset,
        database: Dataset,
        cfg: TrainConfig,
        out_path: Pathish,
        every: int | None = None,
        k: int | None = None,
        frechet_samples: int = 256,
    ):
        self.queries = queries
        self.database = database
        self.cfg = cfg
        self.path = Pathier(out_path)
        self.every = every if every is not None else cfg.probe_every
        self.k = k or cfg.probe_k
        self.frechet_samples = frechet_samples
        self.rows: list[dict[str, float]] = []

    def probe(self, state: TrainState) -> dict[str, float]:
        generator, descriptor = state.snapshot()
        metrics, _ = evaluate_retrieval(descriptor, self.queries, self.database, self.k)
        frechet_set = self.queries.subset(np.arange(min(self.frechet_samples, len(self.queries))))
        frechet = float("nan")
        if len(frechet_set) >= 2:
            frechet = synthetic_frechet(generator, descriptor, frechet_set, self.cfg, self.cfg.seed)
        return {
            "iter": state.iteration,
            "map": metrics[0].value,
            "acc": classification_accuracy(descriptor, self.queries),
            "frechet": frechet,
        }

    def _append(self, row: dict[str, float]):
        if self.rows and row["iter"] <= self.rows[-1]["iter"]:
            return
        self.rows.append(row)
        with self.path.open("a", encoding="utf-8") as file:
            file.write(f"{row['iter']},{row['map']:.6f},{row['acc']:.6f},{row['frechet']:.6f}\n")

    @override
    def on_train_start(self, state: TrainState):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if state.iteration == 0 or not self.path.exists():
            self.path.write_text(self.header + "\n")
            self.rows = []
        else:
            self.rows = read_curves(self.path)

    @override
    def on_iteration_end(self, state: TrainState, report: LossReport):
        if self.every and state.iteration % self.every == 0:
            self._append(self.probe(state))

    @override
    def on_train_end(self, state: TrainState):
        if not self.rows or self.rows[-1]["iter"] != state.iteration:
            self._append(self.probe(state))


def read_curves(path: Pathish) -> list[dict[str, float]]:
    lines = Pathier(path).read_text().splitlines()
    if not lines:
        return []
    keys = lines[0].split(",")
    return [
        {key: (int(value) if key == "iter" else float(value)) for key, value in zip(keys, line.split(","))}
        for line in lines[1:]
        if line
    ]


def metrics_payload(
    metrics: Sequence[MetricResult], accuracy: float | None = None, **extra: object
) -> dict[str, object]:
    """The `metrics.json` document: a list of metric records plus optional accuracy and run details."""
    payload: dict[str, object] = {"metrics": [metric.as_dict() for metric in metrics]}
    payload.update({f"{metric.metric}@{metric.k}": metric.value for metric in metrics})
    if accuracy is not None:
        payload["accuracy"] = accuracy
    payload.update(extra)
    return payload
