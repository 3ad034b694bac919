import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import sparse_engine as se
from sparse_engine import MaskedVector, PruneSet


def _vec(rng, n):
    return rng.standard_normal(n, dtype=np.float32)


class TestPruneSet:
    def test_requires_strictly_increasing(self):
        PruneSet(np.array([0, 2, 5], dtype=np.int64))
        with pytest.raises(ValueError):
            PruneSet(np.array([2, 0], dtype=np.int64))
        with pytest.raises(ValueError):
            PruneSet(np.array([1, 1], dtype=np.int64))

    def test_from_mask(self):
        mask = np.array([True, False, True, False])
        p = PruneSet.from_mask(mask)
        assert p.indices.tolist() == [0, 2]
        assert len(p) == 2

    def test_check_dim(self):
        p = PruneSet(np.array([3], dtype=np.int64))
        p.check_dim(4)
        with pytest.raises(ValueError):
            p.check_dim(3)


class TestCwtApply:
    def test_boundary_prunes(self):
        a = np.array([0.5, -0.5, 0.6], dtype=np.float32)
        t = np.array([0.5, 0.5, 0.5], dtype=np.float32)
        out = se.cwt_apply(a, t)
        assert out.values.tolist() == [0.0, 0.0, pytest.approx(0.6)]
        assert out.nnz == 1

    def test_per_channel(self):
        a = np.array([1.0, 1.0], dtype=np.float32)
        t = np.array([0.5, 2.0], dtype=np.float32)
        out = se.cwt_apply(a, t)
        assert out.values.tolist() == [1.0, 0.0]

    def test_always_prune_overrides(self):
        a = np.array([5.0, 5.0], dtype=np.float32)
        t = np.zeros(2, dtype=np.float32)
        flags = np.array([True, False])
        out = se.cwt_apply(a, t, flags)
        assert out.values.tolist() == [0.0, 5.0]

    def test_survivors_bit_exact(self):
        rng = se.make_rng(3)
        a = _vec(rng, 64)
        t = np.abs(_vec(rng, 64))
        out = se.cwt_apply(a, t)
        keep = np.abs(a) > t
        assert np.array_equal(out.values[keep], a[keep])
        assert np.all(out.values[~keep] == 0.0)

    def test_sparsity_accounting(self):
        out = se.cwt_apply(
            np.array([1.0, 0.0, 2.0, 0.1], dtype=np.float32),
            np.full(4, 0.5, dtype=np.float32),
        )
        assert out.nnz == 2
        assert out.sparsity == pytest.approx(0.5)


class TestCatsApply:
    def test_tensor_wide(self):
        out = se.cats_apply(np.array([0.2, -0.8, 0.5], dtype=np.float32), 0.5)
        assert out.values.tolist() == [0.0, pytest.approx(-0.8), 0.0]

    def test_rejects_negative_threshold(self):
        with pytest.raises(ValueError):
            se.cats_apply(np.ones(2, dtype=np.float32), -1.0)

    def test_zero_threshold_keeps_nonzeros(self):
        a = np.array([0.0, 1e-30, -1.0], dtype=np.float32)
        out = se.cats_apply(a, 0.0)
        assert out.nnz == 2  # exact zeros stay pruned at t=0


class TestMaskedVector:
    def test_from_values_counts(self):
        mv = MaskedVector.from_values(np.array([0.0, 1.0, 0.0, 2.0], dtype=np.float32))
        assert mv.nnz == 2
        assert mv.sparsity == pytest.approx(0.5)


class TestFfnObjective:
    def test_matches_direct_norm(self):
        rng = se.make_rng(11)
        for _ in range(50):
            d = int(rng.integers(4, 65))
            a_up = _vec(rng, d)
            a_gate = _vec(rng, d)
            m = int(rng.integers(0, d + 1))
            idx = np.sort(rng.choice(d, size=m, replace=False)).astype(np.int64)
            got = se.ffn_objective(a_up, a_gate, PruneSet(idx))
            prod = a_up.astype(np.float64) * a_gate.astype(np.float64)
            masked = prod.copy()
            masked[idx] = 0.0
            ref = float(np.sum((prod - masked) ** 2))
            assert got == pytest.approx(ref, rel=1e-12, abs=1e-300)

    def test_empty_pruneset_zero(self):
        assert se.ffn_objective(np.ones(4, np.float32), np.ones(4, np.float32),
                                PruneSet(np.array([], dtype=np.int64))) == 0.0

    def test_accepts_raw_indices(self):
        e = se.ffn_objective(np.array([2.0], np.float32), np.array([3.0], np.float32), [0])
        assert e == pytest.approx(36.0)


class TestAttnObjectives:
    def test_exact_matches_quadratic_form(self):
        rng = se.make_rng(21)
        for _ in range(50):
            d, n = int(rng.integers(4, 33)), int(rng.integers(4, 33))
            x = _vec(rng, d)
            w = rng.standard_normal((d, n), dtype=np.float32)
            m = int(rng.integers(1, d))
            idx = np.sort(rng.choice(d, size=m, replace=False)).astype(np.int64)
            got = se.attn_objective_exact(x, PruneSet(idx), w)
            x64 = x.astype(np.float64)
            xh = x64.copy()
            xh[idx] = 0.0
            delta = xh - x64
            w64 = w.astype(np.float64)
            ref = float(delta @ (w64 @ w64.T) @ delta)
            assert got == pytest.approx(ref, rel=1e-9, abs=1e-300)

    def test_diag_exact_for_orthogonal_rows(self):
        rng = se.make_rng(31)
        d = 16
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        w = np.ascontiguousarray(q.astype(np.float32))  # orthonormal rows and columns
        x = _vec(rng, d)
        idx = np.array([1, 5, 9], dtype=np.int64)
        rn2 = np.sum(w.astype(np.float64) ** 2, axis=1)
        exact = se.attn_objective_exact(x, PruneSet(idx), w)
        diag = se.attn_objective_diag(x, PruneSet(idx), rn2)
        assert diag == pytest.approx(exact, rel=1e-5)

    def test_diag_formula(self):
        x = np.array([2.0, 3.0], dtype=np.float32)
        rn2 = np.array([4.0, 9.0])
        got = se.attn_objective_diag(x, PruneSet(np.array([0, 1], dtype=np.int64)), rn2)
        assert got == pytest.approx(4 * 4 + 9 * 9)

    @given(st.integers(0, 2**32 - 1))
    def test_exact_nonnegative(self, seed):
        rng = se.make_rng(seed)
        d, n = 8, 6
        x = _vec(rng, d)
        w = rng.standard_normal((d, n), dtype=np.float32)
        idx = np.flatnonzero(rng.random(d) < 0.5).astype(np.int64)
        assert se.attn_objective_exact(x, PruneSet(idx), w) >= 0.0
