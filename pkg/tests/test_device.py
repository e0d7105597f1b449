"""Deterministic fault model: hashed draws, spatial maps, subarray cells."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cimrag.device import (BITS_PER_CELL, LSB_BIT, MSB_BIT, POSITIONS,
                           SUBARRAY_SIDE, FaultSeed, SpatialErrorMap,
                           SubarrayCell, generate_error_map, mix64, mix64_vec,
                           resense_bit, sense_bit, sense_flips_vec, stored_bit,
                           uniform01, write_subarray)
from cimrag.errors import FormatError

u64s = st.integers(min_value=0, max_value=2**64 - 1)
small_ints = st.integers(min_value=0, max_value=2**20)


def row_major_mapping():
    """bit index -> (row, col, level_bit), LSBs then MSBs, row-major."""
    out = []
    for level in (LSB_BIT, MSB_BIT):
        for pos in range(POSITIONS):
            out.append((pos // SUBARRAY_SIDE, pos % SUBARRAY_SIDE, level))
    return np.array(out, dtype=np.int64)


class TestHashing:
    @given(key=u64s, fields=st.lists(small_ints, min_size=1, max_size=5))
    @settings(max_examples=150)
    def test_vec_matches_scalar_chain(self, key, fields):
        scalar = mix64(key, *fields)
        vec = mix64_vec(key, *[np.array([f], np.uint64) for f in fields])
        assert int(vec[0]) == scalar

    @given(key=u64s, a=small_ints, b=small_ints)
    @settings(max_examples=100)
    def test_field_order_matters(self, key, a, b):
        if a == b:
            return
        assert mix64(key, a, b) != mix64(key, b, a)

    @given(h=u64s)
    @settings(max_examples=200)
    def test_uniform01_range(self, h):
        u = float(uniform01(h))
        assert 0.0 <= u < 1.0

    def test_known_values_stable(self):
        # frozen regression anchors for the draw stream; changing these
        # silently changes every seeded simulation result
        assert mix64(0, 0) == 16294208416658607535
        assert mix64(1, 2, 3) == 13592992832856903821
        assert float(uniform01(mix64(42, 7))) == 0.9684135896502549

    def test_fault_seed_key_composition(self):
        s = FaultSeed(global_seed=5, core_id=2, macro_pass=1, query_id=9)
        assert s.key == mix64(5, 2, 1, 9)
        assert s.child(7).key == mix64(s.key, 7)
        assert s.child(7, 8).key == mix64(s.key, 7, 8)

    def test_empirical_frequency_tracks_probability(self):
        p = 0.3
        n = 200_000
        keys = mix64_vec(mix64(123), np.arange(n, dtype=np.uint64))
        hits = int(np.sum(uniform01(keys) < p))
        sigma = (n * p * (1 - p)) ** 0.5
        assert abs(hits - n * p) <= 3 * sigma


class TestSpatialErrorMap:
    def test_msb_prob_pinned_to_zero(self):
        m = SpatialErrorMap.uniform(0.9)
        assert m.msb_prob == 0.0
        assert m.prob(3, 3, MSB_BIT) == 0.0
        assert m.prob(3, 3, LSB_BIT) == 0.9

    def test_validation(self):
        with pytest.raises(ValueError):
            SpatialErrorMap(np.full((8, 8), 1.5))
        with pytest.raises(ValueError):
            SpatialErrorMap(np.zeros((4, 4)))

    def test_scaled_clips_to_one(self):
        m = SpatialErrorMap.uniform(0.6).scaled(3.0)
        assert np.all(m.lsb == 1.0)
        with pytest.raises(ValueError):
            m.scaled(-1.0)

    def test_save_load_round_trip(self, tmp_path):
        m = generate_error_map(0.03, 0.05, 0.01, noise_seed=4)
        path = str(tmp_path / "m.txt")
        m.save(path)
        back = SpatialErrorMap.load(path)
        assert np.allclose(back.lsb, m.lsb, rtol=1e-9, atol=1e-12)

    def test_load_diagnostics(self, tmp_path):
        path = str(tmp_path / "m.txt")
        open(path, "w").write("# comment\n0.1 0.2\n")
        with pytest.raises(FormatError):
            SpatialErrorMap.load(path)


class TestGenerateErrorMap:
    def test_uniform_when_effects_zero(self):
        m = generate_error_map(0.0, 0.0, 0.25)
        assert np.all(m.lsb == 0.25)

    def test_all_zero_without_noise(self):
        m = generate_error_map(0.0, 0.0, 0.0)
        assert np.all(m.lsb == 0.0)

    def test_zero_positions_stay_zero_under_noise(self):
        m = generate_error_map(0.0, 0.0, 0.0, noise_seed=11)
        assert np.all(m.lsb == 0.0)

    def test_readout_effect_column_gradient(self):
        m = generate_error_map(0.0, 0.2, 0.0)
        assert np.all(m.lsb[:, 0] > m.lsb[:, 7])
        assert np.all(m.lsb[:, 7] == 0.0)

    def test_rail_effect_peaks_at_centre(self):
        m = generate_error_map(0.35, 0.0, 0.0)
        assert np.all(m.lsb[:, 3] == m.lsb[:, 4])
        assert np.all(m.lsb[:, 3] > m.lsb[:, 0])
        # peak term: rail_effect * min(3, 4)/3.5 = 0.35 * 6/7
        assert np.allclose(m.lsb[:, 3], 0.3)

    @given(rail=st.floats(0, 1), readout=st.floats(0, 1), base=st.floats(0, 1),
           seed=st.one_of(st.none(), st.integers(0, 2**32 - 1)))
    @settings(max_examples=100)
    def test_probabilities_always_valid(self, rail, readout, base, seed):
        m = generate_error_map(rail, readout, base, noise_seed=seed)
        assert np.all((m.lsb >= 0.0) & (m.lsb <= 1.0))

    def test_noise_is_deterministic_and_small(self):
        a = generate_error_map(0.02, 0.03, 0.01, noise_seed=9)
        b = generate_error_map(0.02, 0.03, 0.01, noise_seed=9)
        det = generate_error_map(0.02, 0.03, 0.01)
        assert np.array_equal(a.lsb, b.lsb)
        nz = det.lsb > 0
        assert np.all(np.abs(a.lsb[nz] / det.lsb[nz] - 1.0) <= 0.05 + 1e-12)


class TestSubarrayCell:
    def test_all_zero_bits(self):
        cell = write_subarray(SubarrayCell(), np.zeros(128, np.uint8),
                              row_major_mapping())
        assert np.all(cell.levels == 0)

    def test_single_msb_write_gives_level_two(self):
        bits = np.zeros(128, np.uint8)
        mapping = row_major_mapping()
        # find the mapping slot addressing (0, 0, MSB)
        slot = next(i for i, (r, c, lb) in enumerate(mapping)
                    if (r, c, lb) == (0, 0, MSB_BIT))
        bits[slot] = 1
        cell = write_subarray(SubarrayCell(), bits, mapping)
        assert cell.levels[0, 0] == 2
        assert np.all(cell.levels.ravel()[1:] == 0)

    def test_write_requires_128_bits(self):
        with pytest.raises(ValueError, match="128"):
            write_subarray(SubarrayCell(), np.zeros(64, np.uint8),
                           row_major_mapping())

    def test_write_requires_bijective_mapping(self):
        m = row_major_mapping()
        m[1] = m[0]
        with pytest.raises(ValueError, match="bijectively"):
            write_subarray(SubarrayCell(), np.zeros(128, np.uint8), m)

    @given(bits=st.binary(min_size=128, max_size=128))
    @settings(max_examples=50)
    def test_error_free_round_trip(self, bits):
        b = (np.frombuffer(bits, np.uint8) & 1).astype(np.uint8)
        mapping = row_major_mapping()
        cell = write_subarray(SubarrayCell(), b, mapping)
        seed = FaultSeed(0)
        emap = SpatialErrorMap.zeros()
        for i, (r, c, lb) in enumerate(mapping):
            assert stored_bit(cell, int(r), int(c), int(lb)) == b[i]
            assert sense_bit(cell, int(r), int(c), int(lb), emap, seed) == b[i]


class TestSensing:
    def _cell(self):
        rng = np.random.default_rng(5)
        bits = rng.integers(0, 2, size=128).astype(np.uint8)
        return write_subarray(SubarrayCell(), bits, row_major_mapping())

    def test_msb_never_flips(self):
        cell = self._cell()
        emap = SpatialErrorMap.uniform(1.0)
        seed = FaultSeed(3)
        for r in range(8):
            for c in range(8):
                assert sense_bit(cell, r, c, MSB_BIT, emap, seed) == \
                    stored_bit(cell, r, c, MSB_BIT)

    def test_prob_one_always_inverts_lsb(self):
        cell = self._cell()
        emap = SpatialErrorMap.uniform(1.0)
        seed = FaultSeed(3)
        for attempt in range(4):
            got = resense_bit(cell, 2, 5, LSB_BIT, emap, seed, attempt) \
                if attempt else sense_bit(cell, 2, 5, LSB_BIT, emap, seed)
            assert got == 1 - stored_bit(cell, 2, 5, LSB_BIT)

    def test_sense_updates_cache(self):
        cell = self._cell()
        got = sense_bit(cell, 1, 2, LSB_BIT, SpatialErrorMap.zeros(),
                        FaultSeed(0))
        assert cell.cached_bit == got
        assert cell.cached_addr == (1, 2, LSB_BIT)

    def test_out_of_range_address(self):
        cell = self._cell()
        with pytest.raises(ValueError, match="out of range"):
            sense_bit(cell, 8, 0, LSB_BIT, SpatialErrorMap.zeros(), FaultSeed(0))
        with pytest.raises(ValueError, match="level_bit"):
            stored_bit(cell, 0, 0, 2)

    def test_resense_requires_positive_attempt(self):
        with pytest.raises(ValueError, match=">= 1"):
            resense_bit(self._cell(), 0, 0, LSB_BIT, SpatialErrorMap.zeros(),
                        FaultSeed(0), attempt=0)

    def test_replay_sequence_reproducible(self):
        emap = SpatialErrorMap.uniform(0.5)
        runs = []
        for _ in range(2):
            cell = self._cell()
            seed = FaultSeed(77, core_id=1, query_id=4)
            runs.append([sense_bit(cell, 4, 4, LSB_BIT, emap, seed)] +
                        [resense_bit(cell, 4, 4, LSB_BIT, emap, seed, a)
                         for a in range(1, 6)])
        assert runs[0] == runs[1]
        # attempts must not all agree at p=0.5 over several draws
        assert len(set(runs[0])) == 2

    @given(seed=u64s, column=st.integers(0, 127), prob=st.floats(0, 1),
           r=st.integers(0, 7), c=st.integers(0, 7),
           attempt=st.integers(0, 3))
    @settings(max_examples=100)
    def test_vectorised_flips_match_scalar_path(self, seed, column, prob,
                                                r, c, attempt):
        base = FaultSeed(seed, core_id=3, query_id=1)
        rows = np.arange(16, dtype=np.uint64)
        flips = sense_flips_vec(base, column, rows, r, c, LSB_BIT, attempt,
                                prob)
        emap = SpatialErrorMap.uniform(prob)
        for cell_row in rows:
            cell = SubarrayCell()  # stored 0 everywhere: sensed == flip
            got = sense_bit(cell, r, c, LSB_BIT, emap,
                            base.child(column, int(cell_row)),
                            attempt=attempt)
            assert bool(got) == bool(flips[cell_row])
