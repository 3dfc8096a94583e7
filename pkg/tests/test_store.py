import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keds import store
from keds.errors import ConfigError, DimensionError, FormatError


def brute_force_topk(values: np.ndarray, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Oracle: python sort over all rows by (score desc, id asc)."""
    scores = [(float(np.dot(values[i], query)), i) for i in range(len(values))]
    scores.sort(key=lambda t: (-t[0], t[1]))
    return [(i, s) for s, i in scores[:k]]


def _bank(rows) -> store.FlatIndex:
    return store.FlatIndex(store.EmbeddingMatrix(np.asarray(rows, dtype=np.float32)))


class TestFlatSearch:
    def test_four_row_example(self):
        idx = _bank([[1, 0], [0, 1], [-1, 0], [0.5, 0.5]])
        hits = store.search_topk(idx, np.array([1.0, 0.0]), k=2)
        assert [h[0] for h in hits] == [0, 3]
        np.testing.assert_allclose([h[1] for h in hits], [1.0, 0.5], atol=1e-7)

    def test_k_larger_than_n(self):
        idx = _bank(np.eye(3))
        hits = store.search_topk(idx, np.array([1.0, 0.5, 0.0]), k=10)
        assert len(hits) == 3
        assert [h[0] for h in hits] == [0, 1, 2]

    def test_self_similarity(self):
        rng = np.random.default_rng(0)
        vals = store.normalize_rows(rng.standard_normal((20, 8)).astype(np.float32))
        idx = store.FlatIndex(store.EmbeddingMatrix(vals, normalized=True))
        hits = store.search_topk(idx, vals[7], k=1)
        assert hits[0][0] == 7
        assert abs(hits[0][1] - 1.0) < 1e-6

    def test_dim_mismatch(self):
        idx = _bank(np.eye(3))
        with pytest.raises(DimensionError):
            store.search_topk(idx, np.zeros(5), k=1)

    def test_empty_store(self):
        idx = store.FlatIndex(store.EmbeddingMatrix(np.zeros((0, 4), np.float32)))
        assert store.search_topk(idx, np.zeros(4), k=3) == []

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        vals = rng.standard_normal((200, 16)).astype(np.float32)
        idx = _bank(vals)
        q = rng.standard_normal(16).astype(np.float32)
        got = store.search_topk(idx, q, k=10)
        want = brute_force_topk(vals, q, 10)
        assert [g[0] for g in got] == [w[0] for w in want]

    def test_tie_break_ascending_id(self):
        row = np.array([0.6, 0.8], np.float32)
        idx = _bank([row, row, row])
        hits = store.search_topk(idx, row, k=2)
        assert [h[0] for h in hits] == [0, 1]

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        vals = rng.standard_normal((120, 8)).astype(np.float32)
        idx = _bank(vals)
        queries = rng.standard_normal((9, 8)).astype(np.float32)
        ids, scores = idx.search_batch(queries, k=7)
        for qi in range(9):
            single = store.search_topk(idx, queries[qi], k=7)
            assert list(ids[qi]) == [h[0] for h in single]


class TestIvf:
    def _clustered(self, seed=0):
        rng = np.random.default_rng(seed)
        centers = store.normalize_rows(rng.standard_normal((4, 16)).astype(np.float32))
        rows, labels = [], []
        for c in range(4):
            pts = centers[c] + 0.05 * rng.standard_normal((100, 16)).astype(np.float32)
            rows.append(pts)
            labels += [c] * 100
        vals = store.normalize_rows(np.concatenate(rows))
        return store.EmbeddingMatrix(vals, normalized=True), np.array(labels)

    def test_well_separated_clusters(self):
        matrix, labels = self._clustered()
        idx = store.build_ivf(matrix, partitions=4, iterations=15, seed=1)
        for posting in idx.postings:
            assert len(set(labels[posting])) == 1
        sizes = sorted(len(p) for p in idx.postings)
        assert sizes == [100, 100, 100, 100]

    def test_single_partition(self):
        matrix, _ = self._clustered()
        idx = store.build_ivf(matrix, partitions=1, iterations=3, seed=0)
        assert len(idx.postings) == 1
        assert sorted(idx.postings[0].tolist()) == list(range(400))

    def test_deterministic_build(self):
        matrix, _ = self._clustered()
        a = store.build_ivf(matrix, partitions=4, iterations=5, seed=9)
        b = store.build_ivf(matrix, partitions=4, iterations=5, seed=9)
        assert a.centroids.tobytes() == b.centroids.tobytes()

    def test_partitions_exceed_rows(self):
        matrix, _ = self._clustered()
        with pytest.raises(ConfigError):
            store.build_ivf(matrix, partitions=500, iterations=1)

    def test_postings_partition_ids(self):
        rng = np.random.default_rng(4)
        matrix = store.EmbeddingMatrix(store.normalize_rows(rng.standard_normal((257, 8)).astype(np.float32)))
        idx = store.build_ivf(matrix, partitions=9, iterations=4, seed=2)
        all_ids = np.concatenate(idx.postings)
        assert len(all_ids) == 257
        assert len(set(all_ids.tolist())) == 257

    def test_full_probe_equals_flat(self):
        rng = np.random.default_rng(5)
        matrix = store.EmbeddingMatrix(store.normalize_rows(rng.standard_normal((300, 12)).astype(np.float32)))
        flat = store.FlatIndex(matrix)
        ivf = store.build_ivf(matrix, partitions=7, iterations=4, seed=3)
        for _ in range(10):
            q = store.normalize_rows(rng.standard_normal((1, 12)).astype(np.float32))[0]
            assert store.search_ivf(ivf, q, 9, nprobe=7) == store.search_topk(flat, q, 9)

    def test_recall_against_flat(self):
        # uniform random unit vectors; d kept moderate because directionless
        # data is the worst case for any inverted-file partition
        rng = np.random.default_rng(6)
        n, d, p = 10_000, 16, 100
        matrix = store.EmbeddingMatrix(store.normalize_rows(rng.standard_normal((n, d)).astype(np.float32)))
        flat = store.FlatIndex(matrix)
        ivf = store.build_ivf(matrix, partitions=p, iterations=10, seed=7)
        nprobe = int(np.ceil(p / 4))
        recalls = []
        for _ in range(100):
            q = store.normalize_rows(rng.standard_normal((1, d)).astype(np.float32))[0]
            truth = {h[0] for h in store.search_topk(flat, q, 16)}
            got = {h[0] for h in store.search_ivf(ivf, q, 16, nprobe=nprobe)}
            recalls.append(len(truth & got) / len(truth))
        assert np.mean(recalls) >= 0.9

    def test_k_zero_empty(self):
        matrix, _ = self._clustered()
        idx = store.build_ivf(matrix, partitions=4, iterations=2, seed=0)
        assert store.search_ivf(idx, matrix.values[0], 0, nprobe=2) == []

    def test_nprobe_out_of_range(self):
        matrix, _ = self._clustered()
        idx = store.build_ivf(matrix, partitions=4, iterations=2, seed=0)
        with pytest.raises(ConfigError):
            store.search_ivf(idx, matrix.values[0], 5, nprobe=0)
        with pytest.raises(ConfigError):
            store.search_ivf(idx, matrix.values[0], 5, nprobe=5)


class TestPersistence:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(1)
        matrix = store.EmbeddingMatrix(rng.standard_normal((100, 8)).astype(np.float32), normalized=False)
        path = tmp_path / "bank.kedb"
        store.save(matrix, path)
        back = store.load(path)
        assert back.values.tobytes() == matrix.values.tobytes()
        assert back.normalized == matrix.normalized

    @given(
        n=st.integers(min_value=0, max_value=40),
        d=st.integers(min_value=1, max_value=17),
        seed=st.integers(min_value=0, max_value=2**31 - 1),
    )
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, tmp_path_factory, n, d, seed):
        rng = np.random.default_rng(seed)
        matrix = store.EmbeddingMatrix(rng.standard_normal((n, d)).astype(np.float32), normalized=bool(seed % 2))
        path = tmp_path_factory.mktemp("kedb") / "bank.kedb"
        store.save(matrix, path)
        back = store.load(path)
        assert back.values.tobytes() == matrix.values.tobytes()
        assert back.normalized == matrix.normalized

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bank.kedb"
        store.save(store.EmbeddingMatrix(np.zeros((2, 2), np.float32)), path)
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="bad magic"):
            store.load(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "bank.kedb"
        store.save(store.EmbeddingMatrix(np.ones((4, 4), np.float32)), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(FormatError, match="truncated"):
            store.load(path)

    def test_records_round_trip(self, tmp_path):
        recs = [
            store.KnowledgeRecord(id=0, caption_tokens=[5, 6, 7], subject_span=(0, 2), text="a b c"),
            store.KnowledgeRecord(id=1, caption_tokens=[9], subject_span=None, text=None),
        ]
        path = tmp_path / "meta.jsonl"
        store.save_records(recs, path)
        back = store.load_records(path)
        assert back == recs
