import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import sparse_engine as se
from sparse_engine.tensor_core import as_matrix, as_vector


class TestSilu:
    def test_known_values(self):
        out = se.silu(np.array([1.0, -1.0], dtype=np.float32))
        assert out == pytest.approx([0.7310585786, -0.2689414214], abs=1e-6)

    def test_zero_and_symmetry(self):
        # silu(x) + silu(-x) == x * (2 sigmoid(x) - 1) == x tanh(x/2)
        x = np.linspace(-6, 6, 25, dtype=np.float32)
        s = se.silu(x) + se.silu(-x)
        assert np.allclose(s, x * np.tanh(x / 2), atol=1e-6)
        assert se.silu(np.zeros(3, dtype=np.float32)) == pytest.approx([0, 0, 0])

    @given(st.floats(-30, 30))
    def test_matches_definition(self, v):
        got = float(se.silu(np.array([v], dtype=np.float32))[0])
        ref = v / (1.0 + math.exp(-v))
        assert got == pytest.approx(ref, rel=1e-5, abs=1e-6)

    def test_saturates_without_overflow(self):
        out = se.silu(np.array([-100.0, 100.0], dtype=np.float32))
        assert out[0] == pytest.approx(0.0, abs=1e-6)
        assert out[1] == pytest.approx(100.0, rel=1e-6)


class TestDenseVmm:
    def test_matches_float64_reference(self):
        rng = se.make_rng(0)
        x = rng.standard_normal(37, dtype=np.float32)
        w = rng.standard_normal((37, 53), dtype=np.float32)
        ref = x.astype(np.float64) @ w.astype(np.float64)
        assert se.max_rel_diff(se.dense_vmm(x, w), ref) < 1e-6

    def test_accepts_transposed_view(self):
        rng = se.make_rng(1)
        stored = rng.standard_normal((12, 8), dtype=np.float32)  # [d_out, d_in]
        x = rng.standard_normal(8, dtype=np.float32)
        got = se.dense_vmm(x, stored.T)
        ref = stored.astype(np.float64) @ x.astype(np.float64)
        assert se.max_rel_diff(got, ref) < 1e-6

    def test_dim_mismatch_raises(self):
        with pytest.raises(ValueError):
            se.dense_vmm(np.zeros(3, dtype=np.float32), np.zeros((4, 2), dtype=np.float32))


class TestEmpiricalQuantile:
    def test_known_values(self):
        data = np.array([1.0, 2.0, 3.0, 4.0])
        assert se.empirical_quantile(data, 0.5) == 2.0
        assert se.empirical_quantile(data, 0.0) == 1.0
        assert se.empirical_quantile(data, 1.0) == 4.0
        assert se.empirical_quantile(data, 0.75) == 3.0
        assert se.empirical_quantile(data, 0.76) == 4.0

    def test_unsorted_input(self):
        assert se.empirical_quantile(np.array([4.0, 1.0, 3.0, 2.0]), 0.5) == 2.0

    def test_single_element(self):
        assert se.empirical_quantile(np.array([5.0]), 0.0) == 5.0
        assert se.empirical_quantile(np.array([5.0]), 1.0) == 5.0

    @given(
        st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200),
        st.floats(0.0, 1.0),
    )
    def test_convention(self, values, k):
        arr = np.asarray(values, dtype=np.float64)
        got = se.empirical_quantile(arr, k)
        srt = np.sort(arr)
        idx = min(max(math.ceil(k * arr.size) - 1, 0), arr.size - 1)
        assert got == srt[idx]
        # the defining property: at least fraction k of samples sit at or below
        assert np.mean(arr <= got) >= min(k, 1.0) - 1e-12

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            se.empirical_quantile(np.array([1.0]), -0.1)
        with pytest.raises(ValueError):
            se.empirical_quantile(np.array([1.0]), 1.1)
        with pytest.raises(ValueError):
            se.empirical_quantile(np.array([]), 0.5)


class TestMaxRelDiff:
    def test_zero_for_equal(self):
        a = np.array([1.0, -2.0, 3.0])
        assert se.max_rel_diff(a, a) == 0.0

    def test_scales_by_reference_peak(self):
        ref = np.array([0.0, 10.0])
        got = np.array([0.001, 10.0])
        assert se.max_rel_diff(got, ref) == pytest.approx(1e-4)

    def test_zero_reference(self):
        assert se.max_rel_diff(np.array([0.0]), np.array([0.0])) == 0.0
        assert se.max_rel_diff(np.array([1.0]), np.array([0.0])) > 0


class TestRng:
    def test_deterministic(self):
        a = se.make_rng(123).standard_normal(8)
        b = se.make_rng(123).standard_normal(8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, se.make_rng(124).standard_normal(8))

    def test_algorithm_recorded(self):
        from sparse_engine.tensor_core import RNG_ALGORITHM

        assert RNG_ALGORITHM == "PCG64"
        assert isinstance(se.make_rng(0).bit_generator, np.random.PCG64)


class TestValidators:
    def test_vector_shape(self):
        with pytest.raises(ValueError):
            as_vector(np.zeros((2, 2), dtype=np.float32))

    def test_matrix_shape(self):
        with pytest.raises(ValueError):
            as_matrix(np.zeros(4, dtype=np.float32))

    def test_contiguity_and_dtype(self):
        m = as_matrix(np.zeros((3, 4), dtype=np.float64)[:, ::2])
        assert m.dtype == np.float32 and m.flags.c_contiguous
