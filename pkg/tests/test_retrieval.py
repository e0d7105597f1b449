"""Scoring, hierarchical top-k, the full query path, and results files."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cimrag.errors import DataMismatchError, FormatError
from cimrag.retrieval import (MODE_COSINE, MODE_MIPS, RetrievalResult,
                              RetrievalSystem, ScoredDoc, float_topk,
                              global_topk, load_results, local_topk,
                              oracle_all_scores, oracle_raw_scores,
                              oracle_result, precision_at_k, run_query,
                              save_results, score)
from cimrag.store import QuantizedVector, quantize, quantize_db

from conftest import int_db, make_float_db


def make_query(values, bits=8, scale=1.0):
    return QuantizedVector(np.asarray(values, dtype=np.int8), scale, bits)


class TestScore:
    def test_mips_rescales_by_both_scales(self):
        assert score(-11, 0.5, 0.25, 99.0, 99.0, MODE_MIPS) == -1.375

    def test_mips_ignores_norms(self):
        assert score(7, 2.0, 1.0, 0.0, 0.0, MODE_MIPS) == 14.0

    def test_cosine_divides_by_integer_norms(self):
        assert score(6, 0.5, 0.25, 2.0, 3.0, MODE_COSINE) == 1.0

    def test_cosine_rejects_zero_norms(self):
        with pytest.raises(ValueError, match="query"):
            score(1, 1.0, 1.0, 0.0, 1.0, MODE_COSINE)
        with pytest.raises(ValueError, match="document"):
            score(1, 1.0, 1.0, 1.0, 0.0, MODE_COSINE)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            score(1, 1.0, 1.0, 1.0, 1.0, "dot")


class TestTopK:
    def _entries(self, ids, scores):
        return [ScoredDoc(doc_id=i, raw_score=0, score=s)
                for i, s in zip(ids, scores)]

    def test_ties_break_on_ascending_id(self):
        picked = local_topk(self._entries([10, 11, 12, 13], [5, 9, 9, 1]), 2)
        assert [e.doc_id for e in picked] == [11, 12]

    def test_k_larger_than_pool(self):
        entries = self._entries([1, 2], [0.5, 0.1])
        assert local_topk(entries, 10) == sorted(entries,
                                                 key=lambda e: -e.score)

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            local_topk([], 0)

    def test_global_merge_equals_flat(self):
        a = self._entries([1, 3, 5], [0.9, 0.2, 0.9])
        b = self._entries([2, 4], [0.9, 0.4])
        assert global_topk([local_topk(a, 3), local_topk(b, 3)], 3) == \
            local_topk(a + b, 3)

    @given(st.lists(st.tuples(st.integers(0, 500),
                              st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0])),
                    min_size=1, max_size=60, unique_by=lambda t: t[0]),
           st.integers(1, 10), st.randoms(use_true_random=False))
    @settings(max_examples=200, deadline=None)
    def test_hierarchical_equals_flat(self, pool, k, pyrandom):
        # coarse score grid forces heavy ties across partitions
        entries = [ScoredDoc(doc_id=i, raw_score=0, score=s) for i, s in pool]
        pyrandom.shuffle(entries)
        cut = pyrandom.randint(0, len(entries))
        parts = [entries[:cut], entries[cut:]]
        hier = global_topk([local_topk(p, k) for p in parts], k)
        assert hier == local_topk(entries, k)


@pytest.fixture(scope="module")
def db8():
    rng = np.random.default_rng(7)
    return int_db(rng.integers(-128, 128, size=(50, 128)),
                  8, scales=rng.uniform(0.01, 0.1, 50).astype(np.float32))


@pytest.fixture(scope="module")
def sys8(db8):
    from cimrag.device import SpatialErrorMap
    return RetrievalSystem.build(db8, SpatialErrorMap.zeros())


class TestSystemAssembly:
    def test_build_shapes(self, sys8):
        assert sys8.planes.shape == (16, 128, 128, 128)
        assert sys8.probs.shape == (128,)
        assert not sys8.probs.any()

    def test_column_slices_match_layout(self, sys8):
        col = sys8.column(3, 0)
        assert col.n_planes == 8 * sys8.layout.folds  # one d128 int8 doc
        assert col.n_embeddings == 1
        assert np.array_equal(col.lut,
                              sys8.lut.counts[3, 0, :col.n_planes])

    def test_assemble_matches_build(self, db8, sys8):
        rebuilt = RetrievalSystem.assemble(db8, sys8.layout, sys8.lut,
                                           sys8.emap)
        assert np.array_equal(rebuilt.planes, sys8.planes)

    def test_assemble_rejects_tampered_lut(self, db8, sys8):
        from cimrag.layout import PlaneSumLUT
        counts = sys8.lut.counts.copy()
        counts[0, 0, 0] += 1
        with pytest.raises(DataMismatchError, match="plane sums"):
            RetrievalSystem.assemble(db8, sys8.layout, PlaneSumLUT(counts),
                                     sys8.emap)


class TestRunQueryExactness:
    """With a zero error map the array path must equal flat integer math."""

    def _check_equal(self, system, query, mode, k):
        got, counters = run_query(system, query, mode, k, seed=0)
        want = oracle_result(system.db, query, mode, k)
        assert got.entries == want.entries
        assert got.doc_ids == want.doc_ids
        counters.validate()
        return got, counters

    @pytest.mark.parametrize("mode", [MODE_MIPS, MODE_COSINE])
    def test_matches_oracle_int8(self, sys8, rng, mode):
        for ks in (1, 5, 100):
            q = make_query(rng.integers(-128, 128, 128), 8, 0.03)
            got, _ = self._check_equal(sys8, q, mode, ks)
            assert len(got.entries) == min(ks, 50)

    def test_matches_oracle_int4(self, zero_map, rng):
        db = int_db(rng.integers(-8, 8, size=(40, 128)), 4)
        system = RetrievalSystem.build(db, zero_map)
        q = make_query(rng.integers(-8, 8, 128), 4)
        self._check_equal(system, q, MODE_MIPS, 7)

    def test_matches_oracle_folded_dims(self, zero_map, rng):
        db = int_db(rng.integers(-128, 128, size=(24, 512)), 8)
        system = RetrievalSystem.build(db, zero_map)
        q = make_query(rng.integers(-128, 128, 512), 8)
        self._check_equal(system, q, MODE_COSINE, 5)

    def test_raw_scores_are_integer_products(self, sys8, db8, rng):
        qv = rng.integers(-128, 128, 128)
        got, _ = run_query(sys8, make_query(qv, 8), MODE_MIPS, 50, seed=0)
        raw = oracle_raw_scores(db8, qv)
        by_id = {int(db8.ids[i]): int(raw[i]) for i in range(50)}
        for e in got.entries:
            assert e.raw_score == by_id[e.doc_id]

    def test_keep_all_scores_matches_oracle(self, sys8, db8, rng):
        q = make_query(rng.integers(-128, 128, 128), 8, 0.05)
        got, _ = run_query(sys8, q, MODE_MIPS, 3, seed=0, keep_all_scores=True)
        assert got.all_scores == oracle_all_scores(db8, q, MODE_MIPS)
        plain, _ = run_query(sys8, q, MODE_MIPS, 3, seed=0)
        assert plain.all_scores is None

    def test_nonconsecutive_doc_ids_preserved(self, zero_map, rng):
        ids = np.arange(30, dtype=np.uint64) * 37 + 1000
        db = int_db(rng.integers(-128, 128, size=(30, 128)), 8, ids=ids)
        system = RetrievalSystem.build(db, zero_map)
        q = make_query(rng.integers(-128, 128, 128), 8)
        got, _ = run_query(system, q, MODE_MIPS, 30, seed=0)
        assert sorted(got.doc_ids) == sorted(int(i) for i in ids)

    def test_cosine_self_retrieval(self, zero_map, rng):
        fdb = make_float_db(rng, 32, 128)
        db = quantize_db(fdb, 8)
        system = RetrievalSystem.build(db, zero_map)
        for j in (0, 13, 31):
            q = quantize(fdb.vectors[j], 8)
            got, _ = run_query(system, q, MODE_COSINE, 1, seed=0)
            assert got.doc_ids == [j]
            assert got.entries[0].score == pytest.approx(1.0, abs=0.05)

    def test_empty_db(self, zero_map):
        db = int_db(np.zeros((0, 128), np.int8), 8)
        system = RetrievalSystem.build(db, zero_map)
        got, counters = run_query(system, make_query(np.ones(128), 8),
                                  MODE_MIPS, 5, seed=0)
        assert got.entries == []
        assert all(c.occupied_columns == 0 for c in counters.cores)


class TestZeroNormDocs:
    def test_cosine_skips_and_counts(self, zero_map, rng):
        values = rng.integers(-128, 128, size=(20, 128))
        values[7] = 0
        system = RetrievalSystem.build(int_db(values, 8), zero_map)
        q = make_query(rng.integers(-128, 128, 128), 8)
        got, counters = run_query(system, q, MODE_COSINE, 20, seed=0)
        assert counters.zero_norm_skipped == 1
        assert 7 not in got.doc_ids
        assert len(got.entries) == 19

    def test_mips_keeps_zero_docs(self, zero_map, rng):
        values = rng.integers(-128, 128, size=(20, 128))
        values[7] = 0
        system = RetrievalSystem.build(int_db(values, 8), zero_map)
        q = make_query(rng.integers(-128, 128, 128), 8)
        got, counters = run_query(system, q, MODE_MIPS, 20, seed=0)
        assert counters.zero_norm_skipped == 0
        assert 7 in got.doc_ids


@pytest.fixture(scope="module")
def noisy_system():
    rng = np.random.default_rng(21)
    db = int_db(rng.integers(-128, 128, size=(40, 128)), 8)
    from cimrag.device import generate_error_map
    # low enough that a re-sense has a real chance of landing clean, which
    # is the regime where the popcount screen actually helps
    emap = generate_error_map(rail_effect=0.01, readout_effect=0.02,
                              base=0.004, noise_seed=5)
    return RetrievalSystem.build(db, emap)


class TestDeterminism:
    def test_same_seed_same_outcome(self, noisy_system, rng):
        q = make_query(rng.integers(-128, 128, 128), 8)
        a = run_query(noisy_system, q, MODE_MIPS, 5, seed=3, query_id=2)
        b = run_query(noisy_system, q, MODE_MIPS, 5, seed=3, query_id=2)
        assert a == b

    def test_seed_and_query_id_matter(self, noisy_system, rng):
        q = make_query(rng.integers(-128, 128, 128), 8)
        base, _ = run_query(noisy_system, q, MODE_MIPS, 40, seed=3)
        other_seed, _ = run_query(noisy_system, q, MODE_MIPS, 40, seed=4)
        other_qid, _ = run_query(noisy_system, q, MODE_MIPS, 40, seed=3,
                                 query_id=9)
        def raws(r):
            return [e.raw_score for e in r.entries]
        assert raws(base) != raws(other_seed)
        assert raws(base) != raws(other_qid)

    def test_core_order_cannot_change_anything(self, noisy_system, rng):
        q = make_query(rng.integers(-128, 128, 128), 8)
        a = run_query(noisy_system, q, MODE_MIPS, 5, seed=3)
        shuffled = list(np.random.default_rng(0).permutation(16))
        b = run_query(noisy_system, q, MODE_MIPS, 5, seed=3,
                      core_order=shuffled)
        assert a == b

    def test_detection_flag_changes_error_profile(self, noisy_system, rng):
        q = make_query(rng.integers(-128, 128, 128), 8)
        _, on = run_query(noisy_system, q, MODE_MIPS, 5, seed=3)
        _, off = run_query(noisy_system, q, MODE_MIPS, 5, seed=3,
                           detection=False)
        assert sum(c.residual_bit_flips for c in on.cores) < \
            sum(c.residual_bit_flips for c in off.cores)
        assert sum(c.detect_events for c in off.cores) == 0


class TestRunQueryCounters:
    def test_counters_shape_and_totals(self, sys8, rng):
        q = make_query(rng.integers(-128, 128, 128), 8)
        _, counters = run_query(sys8, q, MODE_MIPS, 5, seed=0)
        assert [c.core_id for c in counters.cores] == list(range(16))
        assert counters.k == 5
        assert counters.norm_ops == 1
        assert sum(c.scores for c in counters.cores) == 50
        # 50 docs breadth-first: cores 0,1 own 4 columns, the rest 3
        for c in counters.cores:
            expect = sys8.layout.occupied_columns(c.core_id)
            assert c.occupied_columns == expect
            assert c.sense_events == 8 * expect
            assert c.detect_events == 8 * expect
            assert c.compute_events == 64 * expect
            assert (c.lat_sense, c.lat_detect, c.lat_compute) == (8, 8, 64)


class TestRunQueryValidation:
    def _q(self, rng, bits=8, dim=128):
        hi = (1 << (bits - 1)) - 1
        return make_query(rng.integers(-hi, hi + 1, dim), bits)

    def test_bad_mode(self, sys8, rng):
        with pytest.raises(ValueError, match="mode"):
            run_query(sys8, self._q(rng), "dot", 5, seed=0)

    def test_bad_k(self, sys8, rng):
        with pytest.raises(ValueError, match="k"):
            run_query(sys8, self._q(rng), MODE_MIPS, 0, seed=0)

    def test_precision_mismatch(self, sys8, rng):
        with pytest.raises(ValueError, match="INT4"):
            run_query(sys8, self._q(rng, bits=4), MODE_MIPS, 5, seed=0)

    def test_dim_mismatch(self, sys8, rng):
        with pytest.raises(ValueError, match="dimension"):
            run_query(sys8, self._q(rng, dim=64), MODE_MIPS, 5, seed=0)

    def test_zero_query_cosine(self, sys8):
        with pytest.raises(ValueError, match="all-zero query"):
            run_query(sys8, make_query(np.zeros(128), 8), MODE_COSINE, 5,
                      seed=0)

    def test_bad_core_order(self, sys8, rng):
        q = self._q(rng)
        with pytest.raises(ValueError, match="permutation"):
            run_query(sys8, q, MODE_MIPS, 5, seed=0, core_order=[0] * 16)
        with pytest.raises(ValueError, match="permutation"):
            run_query(sys8, q, MODE_MIPS, 5, seed=0, core_order=[0, 1])


class TestFloatBaseline:
    def test_ties_and_modes(self):
        vecs = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]])
        ids = np.array([5, 3, 1])
        top = float_topk(vecs, ids, np.array([1.0, 1.0]), MODE_MIPS, 2)
        assert top == [(1, 2.0), (3, 1.0)]  # id 3 beats id 5 on the tie
        cos = float_topk(vecs, ids, np.array([1.0, 0.0]), MODE_COSINE, 3)
        assert [c[0] for c in cos] == [1, 5, 3]
        assert cos[0][1] == pytest.approx(1.0)

    def test_cosine_drops_zero_docs(self):
        vecs = np.array([[1.0, 0.0], [0.0, 0.0]])
        top = float_topk(vecs, np.array([1, 2]), np.array([1.0, 0.0]),
                         MODE_COSINE, 5)
        assert [t[0] for t in top] == [1]

    def test_zero_query_cosine(self):
        with pytest.raises(ValueError, match="all-zero"):
            float_topk(np.ones((2, 2)), np.arange(2), np.zeros(2),
                       MODE_COSINE, 1)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            float_topk(np.ones((2, 2)), np.arange(2), np.ones(2), "dot", 1)

    def test_modes_agree_on_equal_norms(self, zero_map, rng):
        base = rng.integers(-100, 101, size=128)
        values = np.stack([np.roll(base, s) for s in range(20)])
        db = int_db(values, 8)
        assert len(set(db.norms.tolist())) == 1
        system = RetrievalSystem.build(db, zero_map)
        q = make_query(rng.integers(-128, 128, 128), 8)
        mips, _ = run_query(system, q, MODE_MIPS, 20, seed=0)
        cos, _ = run_query(system, q, MODE_COSINE, 20, seed=0)
        assert mips.doc_ids == cos.doc_ids


class TestPrecisionAtK:
    def test_hand_values(self):
        assert precision_at_k([1, 2, 3], {1, 3}, 3) == pytest.approx(2 / 3)
        assert precision_at_k([1, 2, 3], {1}, 1) == 1.0
        assert precision_at_k([2, 3], {1}, 2) == 0.0
        assert precision_at_k([1], {1, 2}, 5) == pytest.approx(1 / 5)

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            precision_at_k([1], {1}, 0)


class TestResultsFiles:
    def _results(self):
        return [
            RetrievalResult(query_id=2, mode=MODE_MIPS, k=2, entries=[
                ScoredDoc(9, 44, 1.25), ScoredDoc(4, 11, -0.5)]),
            RetrievalResult(query_id=7, mode=MODE_MIPS, k=1, entries=[
                ScoredDoc(1, 3, 0.0078125)]),
        ]

    def test_roundtrip(self, tmp_path):
        path = str(tmp_path / "results.tsv")
        save_results(path, self._results())
        text = open(path).read()
        assert text == ("2\t1\t9\t1.25\n"
                        "2\t2\t4\t-0.5\n"
                        "7\t1\t1\t0.0078125\n")
        loaded = load_results(path)
        assert loaded == {2: [(9, 1.25), (4, -0.5)], 7: [(1, 0.0078125)]}

    def test_rank_sequence_enforced(self, tmp_path):
        path = str(tmp_path / "bad.tsv")
        with open(path, "w") as f:
            f.write("1\t1\t10\t0.5\n1\t3\t11\t0.4\n")
        with pytest.raises(FormatError, match="rank 3 out of sequence"):
            load_results(path)

    def test_field_count_enforced(self, tmp_path):
        path = str(tmp_path / "bad.tsv")
        with open(path, "w") as f:
            f.write("1\t1\t10\n")
        with pytest.raises(FormatError, match="4 tab-separated"):
            load_results(path)

    def test_numeric_fields_enforced(self, tmp_path):
        path = str(tmp_path / "bad.tsv")
        with open(path, "w") as f:
            f.write("1\tone\t10\t0.5\n")
        with pytest.raises(FormatError, match="non-numeric"):
            load_results(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = str(tmp_path / "results.tsv")
        with open(path, "w") as f:
            f.write("1\t1\t10\t0.5\n\n1\t2\t11\t0.25\n")
        assert load_results(path) == {1: [(10, 0.5), (11, 0.25)]}
