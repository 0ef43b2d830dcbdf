import numpy as np
import pytest
from pathier import Pathier

from coophash.core import HashIndexError
from coophash.models import RankingResult, sign
from coophash.retrieval import (
    HashIndex,
    LabelRelevance,
    average_precision,
    binarize,
    hamming_distance,
    hamming_distances,
    mean_average_precision,
    precision_at_k,
    retrieval_metrics,
    search,
    search_many,
    unpack,
)

root = Pathier(__file__).parent


def naive_hamming(a: np.ndarray, b: np.ndarray, bits: int) -> int:
    count = 0
    for j in range(bits):
        bit_a = (int(a[j // 8]) >> (j % 8)) & 1
        bit_b = (int(b[j // 8]) >> (j % 8)) & 1
        count += bit_a != bit_b
    return count


def random_index(rng: np.random.Generator, n: int, bits: int) -> HashIndex:
    real = rng.uniform(-1, 1, size=(n, bits))
    ids = rng.permutation(10 * n)[:n]
    labels = [(int(label),) for label in rng.integers(0, 5, size=n)]
    return HashIndex.build(real, ids, labels)


def test__sign_tie_is_positive():
    assert sign(np.array([0.0, -0.0, -1e-9, 2.0])).tolist() == [1, 1, -1, 1]


def test__binarize():
    assert binarize(np.array([0.3, -0.2, 0.0, -5.0])).tolist() == [0b00000101]
    assert binarize(-np.ones(16)).tolist() == [0, 0]
    codes = binarize(np.array([[0.1] * 9, [-0.1] * 9]))
    assert codes.shape == (2, 2)


def test__unpack():
    real = np.random.default_rng(0).uniform(-1, 1, size=(4, 21))
    assert np.array_equal(unpack(binarize(real), 21), sign(real))


def test__hamming_distance_by_hand():
    a = binarize(np.array([1, -1, 1, -1]))
    b = binarize(np.array([1, 1, -1, -1]))
    assert hamming_distance(a, b, 4) == 2
    assert hamming_distance(a, a, 4) == 0


@pytest.mark.parametrize("bits", [16, 32, 64])
def test__hamming_distance_matches_bit_loop(bits: int):
    rng = np.random.default_rng(bits)
    width = bits // 8
    a = rng.integers(0, 256, size=(10_000, width), dtype=np.uint8)
    b = rng.integers(0, 256, size=(10_000, width), dtype=np.uint8)
    for x, y in zip(a, b):
        assert hamming_distance(x, y, bits) == naive_hamming(x, y, bits)


def test__hamming_distance_ignores_padding():
    a = np.array([0b00000000, 0b11110000], dtype=np.uint8)
    b = np.array([0b00000001, 0b00000000], dtype=np.uint8)
    assert hamming_distance(a, b, 12) == 1


def test__hamming_distances():
    rng = np.random.default_rng(1)
    codes = rng.integers(0, 256, size=(50, 4), dtype=np.uint8)
    query = codes[7]
    distances = hamming_distances(query, codes, 32)
    assert distances[7] == 0
    assert distances.tolist() == [naive_hamming(query, code, 32) for code in codes]


def test__hamming_distance_width_mismatch():
    with pytest.raises(HashIndexError):
        hamming_distance(np.zeros(2, np.uint8), np.zeros(3, np.uint8), 16)


def test__search_single_item():
    index = HashIndex.build(np.array([[1.0, -1.0, 1.0]]), [42], [(0,)])
    ranking = search(index, binarize(np.array([1.0, 1.0, 1.0])), k=5, query_id=0)
    assert ranking.items == ((42, 1),)


def test__search_exact_match_first():
    rng = np.random.default_rng(2)
    index = random_index(rng, 100, 32)
    ranking = search(index, index.codes[13], k=10)
    assert ranking.distances[0] == 0


def test__search_tie_break_by_id():
    real = np.array([[1.0, 1.0], [1.0, 1.0], [-1.0, -1.0], [1.0, 1.0]])
    index = HashIndex.build(real, [9, 4, 1, 6], [(0,)] * 4)
    ranking = search(index, binarize(np.array([1.0, 1.0])), k=4)
    assert ranking.ids == [4, 6, 9, 1]
    assert ranking.distances == [0, 0, 0, 2]


def test__search_matches_full_sort():
    rng = np.random.default_rng(3)
    for trial in range(100):
        n = int(rng.integers(1, 500))
        bits = int(rng.choice([8, 12, 16, 32]))
        index = random_index(rng, n, bits)
        query = binarize(rng.uniform(-1, 1, size=bits))
        k = int(rng.integers(1, 60))
        oracle = sorted(
            zip(index.ids.tolist(), [naive_hamming(query, code, bits) for code in index.codes]),
            key=lambda item: (item[1], item[0]),
        )[:k]
        assert list(search(index, query, k).items) == oracle


def test__search_errors():
    index = random_index(np.random.default_rng(4), 5, 8)
    with pytest.raises(HashIndexError):
        search(index, index.codes[0], 0)
    empty = HashIndex(np.empty((0, 1), np.uint8), np.empty(0, np.int64), (), 8)
    with pytest.raises(HashIndexError):
        search(empty, index.codes[0], 1)


def test__HashIndex_unique_ids():
    with pytest.raises(HashIndexError, match="unique"):
        HashIndex.build(np.ones((2, 8)), [1, 1], [(0,), (1,)])


def test__HashIndex_save_load(tmp_path: Pathier):
    index = HashIndex.build(
        np.random.default_rng(5).uniform(-1, 1, size=(20, 12)),
        np.arange(100, 120),
        [(i % 3,) if i % 4 else (0, 2) for i in range(20)],
    )
    path = Pathier(tmp_path) / "index.bin"
    index.save(path)
    loaded = HashIndex.load(path)
    assert loaded.bits == 12
    assert np.array_equal(loaded.codes, index.codes)
    assert np.array_equal(loaded.ids, index.ids)
    assert loaded.labels == index.labels


def test__HashIndex_load_rejects_other_files(tmp_path: Pathier):
    path = Pathier(tmp_path) / "index.bin"
    path.write_bytes(b"not an index")
    with pytest.raises(HashIndexError):
        HashIndex.load(path)
    with pytest.raises(HashIndexError, match="does not exist"):
        HashIndex.load(Pathier(tmp_path) / "missing.bin")


@pytest.mark.parametrize("cut", [1, 9, 40, 200])
def test__HashIndex_load_truncated(tmp_path: Pathier, cut: int):
    index = random_index(np.random.default_rng(9), 20, 16)
    path = Pathier(tmp_path) / "index.bin"
    index.save(path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - cut])
    with pytest.raises(HashIndexError, match="truncated or corrupt"):
        HashIndex.load(path)
    path.write_bytes(data + b"\x00")
    with pytest.raises(HashIndexError, match="trailing"):
        HashIndex.load(path)


def test__hamming_metric_axioms():
    rng = np.random.default_rng(10)
    bits = 24
    codes = binarize(rng.uniform(-1, 1, size=(300, bits)))
    for _ in range(2000):
        a, b, c = codes[rng.integers(0, len(codes), size=3)]
        ab = hamming_distance(a, b, bits)
        assert hamming_distance(a, a, bits) == 0
        assert ab == hamming_distance(b, a, bits)
        assert 0 <= ab <= bits
        assert (ab == 0) == np.array_equal(a, b)
        assert hamming_distance(a, c, bits) <= ab + hamming_distance(b, c, bits)


def test__search_ignores_insertion_order():
    rng = np.random.default_rng(11)
    real = rng.uniform(-1, 1, size=(200, 8))
    ids = rng.permutation(1000)[:200]
    labels = [(int(label),) for label in rng.integers(0, 3, size=200)]
    index = HashIndex.build(real, ids, labels)
    order = rng.permutation(200)
    shuffled = HashIndex.build(real[order], ids[order], [labels[i] for i in order])
    for query in binarize(rng.uniform(-1, 1, size=(20, 8))):
        assert search(index, query, 30) == search(shuffled, query, 30)


def test__binarize_is_idempotent_through_unpack():
    real = np.random.default_rng(12).uniform(-1, 1, size=(50, 37))
    real[0, :5] = 0.0
    packed = binarize(real)
    assert np.array_equal(binarize(unpack(packed, 37)), packed)


@pytest.mark.parametrize(
    "pattern, expected",
    [([1, 1, 1], 1.0), ([0, 0, 0], 0.0), ([1, 0, 1], (1 + 2 / 3) / 2), ([0, 1], 0.5)],
)
def test__average_precision(pattern: list[int], expected: float):
    assert average_precision(pattern, len(pattern)) == pytest.approx(expected, abs=1e-12)


def test__average_precision_matches_enumeration():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        k = int(rng.integers(1, 30))
        pattern = rng.integers(0, 2, size=k).tolist()
        precisions = [sum(pattern[: i + 1]) / (i + 1) for i in range(k)]
        hits = sum(pattern)
        oracle = sum(p for p, rel in zip(precisions, pattern) if rel) / max(1, hits)
        assert abs(average_precision(pattern, k) - oracle) < 1e-9


def make_rankings(patterns: list[list[int]]) -> tuple[list[RankingResult], LabelRelevance]:
    """Rankings whose relevance sequence reproduces `patterns`; query `q` has label 1, items are relevant iff labelled 1."""
    rankings = []
    item_labels: dict[int, frozenset[int]] = {}
    next_id = 0
    for query_id, pattern in enumerate(patterns):
        items = []
        for rank, relevant in enumerate(pattern):
            item_labels[next_id] = frozenset({1 if relevant else 0})
            items.append((next_id, rank))
            next_id += 1
        rankings.append(RankingResult(query_id, tuple(items), len(pattern)))
    query_labels = {query_id: frozenset({1}) for query_id in range(len(patterns))}
    return rankings, LabelRelevance(query_labels, item_labels)


def test__precision_at_k():
    rankings, relevance = make_rankings([[1, 0, 1, 0]])
    assert precision_at_k(rankings, relevance, 4) == 0.5
    rankings, relevance = make_rankings([[1, 1], [0, 0]])
    assert precision_at_k(rankings, relevance, 2) == 0.5


def test__mean_average_precision():
    rankings, relevance = make_rankings([[1, 0, 1], [1, 1, 1], [0, 0, 0]])
    expected = ((1 + 2 / 3) / 2 + 1.0 + 0.0) / 3
    assert mean_average_precision(rankings, relevance, 3) == pytest.approx(expected, abs=1e-12)
    assert mean_average_precision([], relevance, 3) == 0.0


def test__LabelRelevance_multilabel():
    relevance = LabelRelevance({0: frozenset({1, 4})}, {10: frozenset({4, 7}), 11: frozenset({2})})
    assert relevance(0, 10)
    assert not relevance(0, 11)


def test__retrieval_metrics_self_retrieval():
    rng = np.random.default_rng(8)
    real = rng.uniform(-1, 1, size=(30, 64))
    labels = [(i,) for i in range(30)]
    index = HashIndex.build(real, np.arange(30), labels)
    rankings = search_many(index, index.codes, index.ids, 5)
    relevance = LabelRelevance(index.label_map, index.label_map)
    map_1, p_1 = retrieval_metrics(rankings, relevance, 1, 1)
    assert map_1.value == 1.0
    assert p_1.value == 1.0
    assert map_1.n_queries == 30
