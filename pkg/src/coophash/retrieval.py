import struct
from dataclasses import dataclass

import numpy as np
import torch
from pathier import Pathier, Pathish
from typing_extensions import Callable, Iterable, Self, Sequence

from .core import HashIndexError
from .models import MetricResult, RankingResult, sign

INDEX_MAGIC = b"CHIDX"
INDEX_VERSION = 1

Relevance = Callable[[int, int], bool]


def code_bytes(bits: int) -> int:
    return (bits + 7) // 8


def binarize(real_code: torch.Tensor | np.ndarray) -> np.ndarray:
    """
    Pack the signs of `real_code` (shape `(K,)` or `(N, K)`) into bytes.

    Bit `j` lives in byte `j // 8` at position `j % 8` (little-endian within the byte); `+1 -> 1`, `-1 -> 0`.
    `sign(0) = +1`.
    """
    bits = sign(real_code) > 0
    return np.packbits(bits, axis=-1, bitorder="little")


def unpack(packed: np.ndarray, bits: int) -> np.ndarray:
    """Inverse of `binarize` on the sign pattern: packed bytes -> `{-1, +1}` vector(s) of length `bits`."""
    unpacked = np.unpackbits(np.asarray(packed, dtype=np.uint8), axis=-1, count=bits, bitorder="little")
    return np.where(unpacked == 1, 1, -1).astype(np.int8)


def _tail_mask(bits: int) -> np.ndarray:
    """Per-byte masks that zero the padding bits past `bits`."""
    mask = np.full(code_bytes(bits), 0xFF, dtype=np.uint8)
    if bits % 8:
        mask[-1] = (1 << (bits % 8)) - 1
    return mask


def _check_width(codes: np.ndarray, bits: int):
    if codes.shape[-1] != code_bytes(bits):
        raise HashIndexError(
            f"Packed code has {codes.shape[-1]} bytes but K={bits} needs {code_bytes(bits)}."
        )


def hamming_distance(a: np.ndarray, b: np.ndarray, bits: int) -> int:
    """Number of differing bits among the first `bits`, counted with a popcount over the XOR."""
    a, b = np.asarray(a, dtype=np.uint8), np.asarray(b, dtype=np.uint8)
    _check_width(a, bits)
    _check_width(b, bits)
    return int(np.bitwise_count((a ^ b) & _tail_mask(bits)).sum())


def hamming_distances(query: np.ndarray, codes: np.ndarray, bits: int) -> np.ndarray:
    """Distances from one packed `query` to every row of `codes`."""
    query, codes = np.asarray(query, dtype=np.uint8), np.asarray(codes, dtype=np.uint8)
    _check_width(query, bits)
    _check_width(codes, bits)
    return np.bitwise_count((codes ^ query) & _tail_mask(bits)).sum(axis=1, dtype=np.int64)


@dataclass(frozen=True)
class HashIndex:
    """Packed codes, unique item ids and label sets for an exhaustive Hamming scan. Immutable once built."""

    codes: np.ndarray
    ids: np.ndarray
    labels: tuple[frozenset[int], ...]
    bits: int

    def __post_init__(self):
        if len(self.codes) != len(self.ids) or len(self.ids) != len(self.labels):
            raise HashIndexError("Codes, ids and labels must have the same length.")
        if len(np.unique(self.ids)) != len(self.ids):
            raise HashIndexError("Item ids must be unique.")
        if len(self.codes):
            _check_width(self.codes, self.bits)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def build(
        cls,
        real_codes: torch.Tensor | np.ndarray,
        ids: Sequence[int] | np.ndarray,
        labels: Sequence[Iterable[int]],
    ) -> Self:
        real_codes = np.asarray(
            real_codes.detach().cpu() if isinstance(real_codes, torch.Tensor) else real_codes
        )
        return cls(
            binarize(real_codes),
            np.asarray(ids, dtype=np.int64),
            tuple(frozenset(int(label) for label in item) for item in labels),
            int(real_codes.shape[-1]),
        )

    @property
    def label_map(self) -> dict[int, frozenset[int]]:
        return {int(item_id): labels for item_id, labels in zip(self.ids, self.labels)}

    def save(self, path: Pathish):
        """
        Layout: magic, version (u16), K (u32), N (u64), ids (N x i64), codes (N x ceil(K/8) bytes),
        then per item a u16 label count followed by u32 labels. All little-endian.
        """
        chunks = [
            INDEX_MAGIC,
            struct.pack("<HIQ", INDEX_VERSION, self.bits, len(self)),
            self.ids.astype("<i8").tobytes(),
            np.ascontiguousarray(self.codes, dtype=np.uint8).tobytes(),
        ]
        for labels in self.labels:
            ordered = sorted(labels)
            chunks.append(struct.pack(f"<H{len(ordered)}I", len(ordered), *ordered))
        Pathier(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path: Pathish) -> Self:
        path = Pathier(path)
        if not path.exists():
            raise HashIndexError(f"Index file `{path}` does not exist.")
        data = path.read_bytes()
        if not data.startswith(INDEX_MAGIC):
            raise HashIndexError(f"`{path}` is not an index file.")
        offset = len(INDEX_MAGIC)
        try:
            version, bits, count = struct.unpack_from("<HIQ", data, offset)
            if version != INDEX_VERSION:
                raise HashIndexError(f"Unsupported index version {version}.")
            offset += struct.calcsize("<HIQ")
            ids = np.frombuffer(data, dtype="<i8", count=count, offset=offset).astype(np.int64)
            offset += 8 * count
            width = code_bytes(bits)
            codes = np.frombuffer(data, dtype=np.uint8, count=count * width, offset=offset)
            offset += count * width
            labels: list[frozenset[int]] = []
            for _ in range(count):
                (n_labels,) = struct.unpack_from("<H", data, offset)
                offset += 2
                labels.append(frozenset(struct.unpack_from(f"<{n_labels}I", data, offset)))
                offset += 4 * n_labels
        except (struct.error, ValueError) as e:
            raise HashIndexError(f"`{path}` is truncated or corrupt: {e}") from e
        if offset != len(data):
            raise HashIndexError(f"`{path}` has {len(data) - offset} unexpected trailing bytes.")
        return cls(codes.reshape(count, width).copy(), ids, tuple(labels), bits)


def search(index: HashIndex, query_code: np.ndarray, k: int, query_id: int = -1) -> RankingResult:
    """
    Top `k` items by Hamming distance, ties broken by ascending item id.

    `k` larger than the index returns every item.
    """
    if k < 1:
        raise HashIndexError(f"k must be ≥ 1 (got {k}).")
    if not len(index):
        raise HashIndexError("Can't search an empty index.")
    distances = hamming_distances(query_code, index.codes, index.bits)
    order = np.lexsort((index.ids, distances))[:k]
    return RankingResult(
        query_id,
        tuple((int(index.ids[i]), int(distances[i])) for i in order),
        k,
    )


def search_many(
    index: HashIndex, query_codes: np.ndarray, query_ids: Sequence[int] | np.ndarray, k: int
) -> list[RankingResult]:
    return [search(index, code, k, int(query_id)) for code, query_id in zip(query_codes, query_ids)]


class LabelRelevance:
    """
    Relevance oracle from label sets: relevant iff the query and item share a label.

    For single-label data this is plain label equality.
    """

    def __init__(self, query_labels: dict[int, frozenset[int]], item_labels: dict[int, frozenset[int]]):
        self.query_labels = query_labels
        self.item_labels = item_labels

    def __call__(self, query_id: int, item_id: int) -> bool:
        return bool(self.query_labels[query_id] & self.item_labels[item_id])


def relevance_pattern(ranking: RankingResult, relevance: Relevance, k: int) -> list[bool]:
    return [relevance(ranking.query_id, item_id) for item_id in ranking.ids[:k]]


def average_precision(pattern: Sequence[bool | int], k: int) -> float:
    """`Σ_{i≤k} P(i)·rel(i) / max(1, Σ_{i≤k} rel(i))`; zero when nothing relevant is in the top `k`."""
    hits = 0
    total = 0.0
    for i, relevant in enumerate(pattern[:k], 1):
        if relevant:
            hits += 1
            total += hits / i
    return total / max(1, hits)


def mean_average_precision(rankings: Sequence[RankingResult], relevance: Relevance, k: int) -> float:
    if not rankings:
        return 0.0
    return float(
        np.mean([average_precision(relevance_pattern(ranking, relevance, k), k) for ranking in rankings])
    )


def precision_at_k(rankings: Sequence[RankingResult], relevance: Relevance, k: int) -> float:
    """Mean over queries of (relevant items in the top `k`) / `k`."""
    if not rankings:
        return 0.0
    return float(np.mean([sum(relevance_pattern(ranking, relevance, k)) / k for ranking in rankings]))


def retrieval_metrics(
    rankings: Sequence[RankingResult], relevance: Relevance, map_k: int, precision_k: int
) -> list[MetricResult]:
    return [
        MetricResult("mAP", map_k, mean_average_precision(rankings, relevance, map_k), len(rankings)),
        MetricResult("P", precision_k, precision_at_k(rankings, relevance, precision_k), len(rankings)),
    ]
