import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sparse_engine as se
from sparse_engine import ModelConfig
from sparse_engine.oracle import EXHAUSTIVE_MAX_DIM


class TestFfnOracle:
    def test_worked_example(self):
        a_up = np.array([1.0, 2.0, 3.0], dtype=np.float32)
        a_gate = np.array([3.0, 1.0, 1.0], dtype=np.float32)
        p = se.optimal_ffn_pruneset(a_up, a_gate, k=1 / 3)
        assert list(p.indices) == [1]  # contributions 3, 2, 3

    def test_count_budget(self):
        a_up = np.array([4.0, 1.0, 2.0, 3.0], dtype=np.float32)
        a_gate = np.ones(4, dtype=np.float32)
        p = se.optimal_ffn_pruneset(a_up, a_gate, count=2)
        assert list(p.indices) == [1, 2]

    def test_tie_prefers_lowest_index(self):
        a = np.ones(5, dtype=np.float32)
        p = se.optimal_ffn_pruneset(a, a, count=2)
        assert list(p.indices) == [0, 1]

    def test_k_rounds_up(self):
        a = np.arange(1, 11, dtype=np.float32)
        p = se.optimal_ffn_pruneset(a, np.ones(10, dtype=np.float32), k=0.21)
        assert len(p) == 3  # ceil(0.21 * 10)

    def test_extremes(self):
        a = np.arange(1, 5, dtype=np.float32)
        ones = np.ones(4, dtype=np.float32)
        assert len(se.optimal_ffn_pruneset(a, ones, k=0.0)) == 0
        assert len(se.optimal_ffn_pruneset(a, ones, k=1.0)) == 4

    def test_budget_validation(self):
        a = np.ones(3, dtype=np.float32)
        with pytest.raises(ValueError):
            se.optimal_ffn_pruneset(a, a)
        with pytest.raises(ValueError):
            se.optimal_ffn_pruneset(a, a, k=0.5, count=1)
        with pytest.raises(ValueError):
            se.optimal_ffn_pruneset(a, a, count=4)

    @settings(max_examples=40)
    @given(st.integers(0, 10 ** 6), st.integers(2, 24), st.integers(0, 24))
    def test_dominates_random_subsets(self, seed, d, raw_count):
        rng = se.make_rng(seed)
        a_up = rng.standard_normal(d, dtype=np.float32)
        a_gate = rng.standard_normal(d, dtype=np.float32)
        count = raw_count % (d + 1)
        best = se.optimal_ffn_pruneset(a_up, a_gate, count=count)
        e_best = se.ffn_objective(a_up, a_gate, best)
        for _ in range(20):
            other = np.sort(rng.choice(d, size=count, replace=False)).astype(np.int64)
            e_other = se.ffn_objective(a_up, a_gate, se.PruneSet(other))
            assert e_best <= e_other + 1e-12


class TestAttnOracle:
    def test_abs_ignores_weights(self):
        x = np.array([0.5, -0.1, 2.0, -0.3], dtype=np.float32)
        p = se.optimal_attn_pruneset(x, count=2, objective="abs")
        assert list(p.indices) == [1, 3]

    def test_diag_matches_exact_for_orthogonal_rows(self):
        # with orthonormal weight rows the cross terms vanish and the
        # diagonal surrogate ranks subsets identically
        rng = se.make_rng(11)
        q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        w = q.astype(np.float32)
        x = rng.standard_normal(8, dtype=np.float32)
        a = se.optimal_attn_pruneset(x, w, count=3, objective="exact")
        b = se.optimal_attn_pruneset(x, w, count=3, objective="diag")
        assert list(a.indices) == list(b.indices)

    def test_exact_matches_independent_brute_force(self):
        rng = se.make_rng(12)
        for trial in range(10):
            d, n = 7, 5
            x = rng.standard_normal(d, dtype=np.float32)
            w = rng.standard_normal((d, n), dtype=np.float32)
            count = 3
            got = se.optimal_attn_pruneset(x, w, count=count, objective="exact")
            best, best_err = None, np.inf
            for combo in itertools.combinations(range(d), count):
                p = se.PruneSet(np.array(combo, dtype=np.int64))
                e = se.attn_objective_exact(x, p, w)
                if e < best_err:
                    best, best_err = combo, e
            assert list(got.indices) == list(best)
            assert se.attn_objective_exact(x, got, w) == pytest.approx(best_err, rel=1e-12)

    def test_exact_dominates_random_subsets(self):
        rng = se.make_rng(13)
        d, n, count = 10, 6, 4
        x = rng.standard_normal(d, dtype=np.float32)
        w = rng.standard_normal((d, n), dtype=np.float32)
        best = se.optimal_attn_pruneset(x, w, count=count, objective="exact")
        e_best = se.attn_objective_exact(x, best, w)
        for _ in range(50):
            other = np.sort(rng.choice(d, size=count, replace=False)).astype(np.int64)
            assert e_best <= se.attn_objective_exact(x, se.PruneSet(other), w) + 1e-12

    def test_exact_tie_prefers_first_combination(self):
        # duplicate coordinates make several subsets equal-cost
        x = np.array([1.0, 1.0, 1.0], dtype=np.float32)
        w = np.eye(3, dtype=np.float32)
        p = se.optimal_attn_pruneset(x, w, count=1, objective="exact")
        assert list(p.indices) == [0]

    def test_exact_rejects_large_dim(self):
        x = np.zeros(EXHAUSTIVE_MAX_DIM + 1, dtype=np.float32)
        w = np.zeros((EXHAUSTIVE_MAX_DIM + 1, 2), dtype=np.float32)
        with pytest.raises(ValueError):
            se.optimal_attn_pruneset(x, w, count=1, objective="exact")

    def test_exact_requires_weights(self):
        with pytest.raises(ValueError):
            se.optimal_attn_pruneset(np.ones(3, dtype=np.float32), count=1, objective="exact")

    def test_unknown_objective(self):
        with pytest.raises(ValueError):
            se.optimal_attn_pruneset(np.ones(3, dtype=np.float32), count=1, objective="ridge")

    def test_diag_worked_example(self):
        # row norms 1 and 4; x = [2, 1]: costs 4*1=4 vs 1*16=16 -> drop index 0
        x = np.array([2.0, 1.0], dtype=np.float32)
        w = np.array([[1.0, 0.0], [0.0, 4.0]], dtype=np.float32)
        p = se.optimal_attn_pruneset(x, w, count=1, objective="diag")
        assert list(p.indices) == [0]


HAND_CONFIG = ModelConfig(
    n_layers=1, d_model=2, d_ff=2, n_heads=1, n_kv_heads=1,
    vocab_size=4, max_seq_len=4,
)


def _identity_layer() -> se.LayerWeights:
    eye = np.eye(2, dtype=np.float32)
    return se.LayerWeights(wq=eye.copy(), wk=eye.copy(), wv=eye.copy(), wo=eye.copy(),
                           w_gate=eye.copy(), w_up=eye.copy(), w_down=eye.copy())


class TestReferenceBlock:
    def test_hand_case_identity_weights(self):
        # x = [1, 2] through an all-identity block, derived independently at
        # 40-digit precision and frozen here
        x = np.array([1.0, 2.0], dtype=np.float32)
        out, k_new, v_new = se.reference_block_forward(x, _identity_layer(), HAND_CONFIG)
        expect = np.array([1.8936722471987177, 4.51269897901018])
        assert np.max(np.abs(out - expect)) < 1e-12
        xn = np.array([0.6324542671264065, 1.264908534252813])
        assert np.max(np.abs(k_new[0] - xn)) < 1e-12
        assert np.max(np.abs(v_new[0] - xn)) < 1e-12

    def test_single_position_attention_is_value_passthrough(self):
        # with one cached position softmax weights are exactly 1 regardless of scores
        rng = se.make_rng(14)
        layer = _identity_layer()
        layer.wq[:] = rng.standard_normal((2, 2), dtype=np.float32)
        x = rng.standard_normal(2, dtype=np.float32)
        base_out, _, _ = se.reference_block_forward(x, _identity_layer(), HAND_CONFIG)
        out, _, _ = se.reference_block_forward(x, layer, HAND_CONFIG)
        assert np.max(np.abs(out - base_out)) < 1e-15

    def test_past_kv_changes_output(self):
        rng = se.make_rng(15)
        layer = _identity_layer()
        x = rng.standard_normal(2, dtype=np.float32)
        out0, k0, v0 = se.reference_block_forward(x, layer, HAND_CONFIG)
        out1, _, _ = se.reference_block_forward(
            x, layer, HAND_CONFIG,
            past_k=rng.standard_normal((1, 1, 2)), past_v=rng.standard_normal((1, 1, 2)),
        )
        assert not np.allclose(out0, out1)

    def test_float64_output(self):
        out, k_new, v_new = se.reference_block_forward(
            np.array([1.0, 2.0], dtype=np.float32), _identity_layer(), HAND_CONFIG)
        assert out.dtype == np.float64 and k_new.dtype == np.float64
