import numpy as np
import pytest

from recap.errors import (
    ChecksumMismatch,
    DimensionMismatch,
    DuplicateId,
    EmptyCorpus,
    FormatVersionMismatch,
    ZeroVector,
)
from recap.index import (
    ImageTextRecord,
    Index,
    IndexConfig,
    build,
    normalize,
    normalize_caption,
)


def make_records(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    return [
        ImageTextRecord(id=i, image_uri=f"mem://{i}", caption=f"caption {i}",
                        embedding=rng.standard_normal(dim))
        for i in range(n)
    ]


def brute_force_knn(records, query, k):
    """Independent oracle: full scan, argsort by (-score, id)."""
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    scored = []
    for r in records:
        e = np.asarray(r.embedding, dtype=np.float64)
        e = e / np.linalg.norm(e)
        scored.append((float(e @ q), r.id))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [(rid, s) for s, rid in scored[:k]]


class TestNormalize:
    def test_345_triangle(self):
        assert np.allclose(normalize([3.0, 4.0]), [0.6, 0.8])

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            normalize([0.0, 0.0, 0.0])

    def test_seeded_64dim_unit_norm(self):
        v = np.random.default_rng(42).standard_normal(64)
        out = normalize(v)
        # independent norm computation
        assert abs(sum(x * x for x in out) ** 0.5 - 1.0) <= 1e-5

    def test_direction_preserved(self):
        v = np.array([1.0, 2.0, -3.0])
        out = normalize(v)
        assert np.allclose(np.cross(v, out), 0.0)


class TestCaptionNorm:
    def test_whitespace_collapse(self):
        assert normalize_caption("  a  red\tbus \n") == "a red bus"

    def test_case_preserved(self):
        assert normalize_caption("A Red Bus") == "A Red Bus"

    def test_nfc(self):
        # e + combining acute vs precomposed
        assert normalize_caption("café") == normalize_caption("café")


class TestBuild:
    def test_exact_small(self):
        idx = build(make_records(3, 4), IndexConfig(mode="exact", dim=4))
        assert len(idx) == 3
        assert idx.knn(idx.records[0].embedding, 1)[0].record_id == 0

    def test_ivf_partition_complete(self):
        recs = make_records(100, 8)
        idx = build(recs, IndexConfig(mode="ivf", dim=8, nlist=4, nprobe=4))
        counts = np.bincount(idx.assignments, minlength=4)
        assert counts.sum() == 100
        assert (idx.assignments >= 0).all() and (idx.assignments < 4).all()

    def test_dimension_mismatch(self):
        recs = make_records(2, 4) + [
            ImageTextRecord(id=9, image_uri="", caption="x",
                            embedding=np.ones(8))
        ]
        with pytest.raises(DimensionMismatch):
            build(recs, IndexConfig(mode="exact", dim=4))

    def test_duplicate_id(self):
        recs = make_records(2, 4)
        recs.append(ImageTextRecord(id=0, image_uri="", caption="x",
                                    embedding=np.ones(4)))
        with pytest.raises(DuplicateId):
            build(recs, IndexConfig(mode="exact", dim=4))

    def test_empty(self):
        with pytest.raises(EmptyCorpus):
            build([], IndexConfig(mode="exact", dim=4))

    def test_deterministic_clustering(self):
        recs = make_records(60, 8, seed=3)
        cfg = IndexConfig(mode="ivf", dim=8, nlist=5, nprobe=5, seed=11)
        a = build(recs, cfg)
        b = build(recs, cfg)
        assert np.array_equal(a.assignments, b.assignments)


class TestKnn:
    def test_self_similarity(self):
        idx = build(make_records(10, 16), IndexConfig(mode="exact", dim=16))
        for r in idx.records[:3]:
            top = idx.knn(r.embedding, 1)[0]
            assert top.record_id == r.id
            assert abs(top.score - 1.0) <= 1e-6

    def test_hand_computed_example(self):
        recs = [
            ImageTextRecord(id=1, image_uri="", caption="e1", embedding=np.array([1.0, 0.0])),
            ImageTextRecord(id=2, image_uri="", caption="e2", embedding=np.array([0.0, 1.0])),
            ImageTextRecord(id=3, image_uri="", caption="e3", embedding=np.array([0.6, 0.8])),
        ]
        idx = build(recs, IndexConfig(mode="exact", dim=2))
        out = idx.knn(np.array([1.0, 0.0]), 2)
        assert [n.record_id for n in out] == [1, 3]
        assert out[0].score == pytest.approx(1.0, abs=1e-12)
        assert out[1].score == pytest.approx(0.6, abs=1e-12)

    def test_oracle_equivalence(self):
        recs = make_records(500, 16, seed=7)
        idx = build(recs, IndexConfig(mode="exact", dim=16))
        rng = np.random.default_rng(8)
        for _ in range(25):
            q = normalize(rng.standard_normal(16))
            got = [(n.record_id, n.score) for n in idx.knn(q, 10)]
            want = brute_force_knn(recs, q, 10)
            assert [g[0] for g in got] == [w[0] for w in want]
            assert np.allclose([g[1] for g in got], [w[1] for w in want])

    def test_scores_non_increasing(self):
        idx = build(make_records(200, 8, seed=1), IndexConfig(mode="exact", dim=8))
        q = normalize(np.random.default_rng(2).standard_normal(8))
        scores = [n.score for n in idx.knn(q, 50)]
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_tie_break_ascending_id(self):
        e = normalize(np.array([1.0, 1.0]))
        recs = [
            ImageTextRecord(id=i, image_uri="", caption=f"{i}", embedding=e.copy())
            for i in (5, 1, 9)
        ]
        idx = build(recs, IndexConfig(mode="exact", dim=2))
        assert [n.record_id for n in idx.knn(e, 3)] == [1, 5, 9]

    def test_ivf_full_probe_equals_exact(self):
        recs = make_records(300, 16, seed=4)
        exact = build(recs, IndexConfig(mode="exact", dim=16))
        ivf = build(recs, IndexConfig(mode="ivf", dim=16, nlist=8, nprobe=8, seed=4))
        rng = np.random.default_rng(5)
        for _ in range(200):
            q = normalize(rng.standard_normal(16))
            a = [(n.record_id, n.score) for n in exact.knn(q, 12)]
            b = [(n.record_id, n.score) for n in ivf.knn(q, 12)]
            assert a == b

    def test_query_dimension_mismatch(self):
        idx = build(make_records(3, 4), IndexConfig(mode="exact", dim=4))
        with pytest.raises(DimensionMismatch):
            idx.knn(np.ones(8), 1)

    def test_k_larger_than_index(self):
        idx = build(make_records(3, 4), IndexConfig(mode="exact", dim=4))
        assert len(idx.knn(np.ones(4), 10)) == 3


class TestPersistence:
    def test_round_trip_byte_identical(self, tmp_path):
        idx = build(make_records(100, 8, seed=9), IndexConfig(mode="exact", dim=8))
        p = tmp_path / "a.rvi"
        idx.save(str(p))
        again = Index.load(str(p))
        assert again.to_bytes() == idx.to_bytes()

    def test_round_trip_preserves_content(self, tmp_path):
        idx = build(make_records(50, 8, seed=9),
                    IndexConfig(mode="ivf", dim=8, nlist=4, nprobe=4, seed=2))
        p = tmp_path / "a.rvi"
        idx.save(str(p))
        again = Index.load(str(p))
        assert np.array_equal(again.matrix, idx.matrix)
        assert np.array_equal(again.assignments, idx.assignments)
        assert [r.caption for r in again.records] == [r.caption for r in idx.records]

    def test_ivf_round_trip_same_answers(self, tmp_path):
        recs = make_records(120, 8, seed=10)
        idx = build(recs, IndexConfig(mode="ivf", dim=8, nlist=6, nprobe=3, seed=3))
        p = tmp_path / "a.rvi"
        idx.save(str(p))
        again = Index.load(str(p))
        rng = np.random.default_rng(11)
        for _ in range(50):
            q = normalize(rng.standard_normal(8))
            assert [(n.record_id, n.score) for n in idx.knn(q, 5)] == \
                   [(n.record_id, n.score) for n in again.knn(q, 5)]

    def test_corrupt_magic(self, tmp_path):
        idx = build(make_records(3, 4), IndexConfig(mode="exact", dim=4))
        p = tmp_path / "a.rvi"
        idx.save(str(p))
        raw = bytearray(p.read_bytes())
        raw[:4] = b"XXXX"
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatVersionMismatch):
            Index.load(str(p))

    def test_corrupt_payload(self, tmp_path):
        idx = build(make_records(3, 4), IndexConfig(mode="exact", dim=4))
        p = tmp_path / "a.rvi"
        idx.save(str(p))
        raw = bytearray(p.read_bytes())
        raw[40] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatch):
            Index.load(str(p))

    def test_normalization_closure(self, tmp_path):
        idx = build(make_records(40, 8, seed=12), IndexConfig(mode="exact", dim=8))
        p = tmp_path / "a.rvi"
        idx.save(str(p))
        again = Index.load(str(p))
        norms = np.linalg.norm(again.matrix, axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-5)
