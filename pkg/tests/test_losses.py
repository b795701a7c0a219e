"""Kernel discrepancies, pair normalization, and dynamic loss weighting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priorfit import autodiff as ad
from priorfit import losses
from priorfit.autodiff import Tape
from priorfit.losses import KernelSpec, LossConfigError

RNG = np.random.default_rng(99)


def naive_mmd2(x, y, kfun):
    """Double-loop oracle for the biased squared-discrepancy estimator."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    kxx = np.mean([[kfun(a, b) for b in x] for a in x])
    kyy = np.mean([[kfun(a, b) for b in y] for a in y])
    kxy = np.mean([[kfun(a, b) for b in y] for a in x])
    return kxx + kyy - 2 * kxy


def energy_k(a, b):
    return -np.linalg.norm(a - b)


def gaussian_k(a, b, sigmas=(0.5, 1.0, 2.0)):
    sq = np.sum((a - b) ** 2)
    return sum(np.exp(-sq / (2 * s * s)) for s in sigmas)


class TestKernelSpec:
    def test_validation(self):
        with pytest.raises(LossConfigError):
            KernelSpec(kind="laplace")
        with pytest.raises(LossConfigError):
            KernelSpec(kind="gaussian", sigmas=())
        with pytest.raises(LossConfigError):
            KernelSpec(kind="gaussian", sigmas=(1.0, -2.0))
        assert KernelSpec().kind == "energy"
        assert KernelSpec(kind="gaussian").sigmas == (0.5, 1.0, 2.0)


class TestMMD:
    def test_singleton_energy_value(self):
        # x={1}, y={3}: 0 + 0 - 2*(-|1-3|) = 4 exactly
        assert losses.mmd2_biased(np.array([[1.0]]), np.array([[3.0]])) == 4.0

    def test_identical_samples_give_zero(self):
        x = RNG.normal(size=(30, 2))
        assert abs(losses.mmd2_biased(x, x)) <= 1e-12
        g = KernelSpec(kind="gaussian")
        assert abs(losses.mmd2_biased(x, x, g)) <= 1e-12

    def test_matches_double_loop_oracle(self):
        x = RNG.normal(size=(20, 3))
        y = RNG.normal(size=(20, 3)) + 0.3
        got = losses.mmd2_biased(x, y)
        assert got == pytest.approx(naive_mmd2(x, y, energy_k), abs=1e-10)
        got_g = losses.mmd2_biased(x, y, KernelSpec(kind="gaussian"))
        assert got_g == pytest.approx(naive_mmd2(x, y, gaussian_k), abs=1e-10)

    def test_unequal_sample_counts(self):
        x = RNG.normal(size=(12, 2))
        y = RNG.normal(size=(7, 2))
        assert losses.mmd2_biased(x, y) == pytest.approx(naive_mmd2(x, y, energy_k), abs=1e-10)

    def test_one_dimensional_fast_path(self):
        x = RNG.normal(size=(15, 1))
        y = RNG.normal(size=(9, 1))
        assert losses.mmd2_biased(x, y) == pytest.approx(naive_mmd2(x, y, energy_k), abs=1e-10)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(LossConfigError):
            losses.kernel_eval(np.ones((2, 2)), np.ones((2, 3)))

    def test_node_path_equals_array_path(self):
        x = RNG.normal(size=(10, 9))
        y = RNG.normal(size=(1, 9))
        for spec in (KernelSpec(), KernelSpec(kind="gaussian")):
            tape = Tape()
            node = losses.mmd2_biased(tape.input(x), y, spec)
            assert float(node.values) == pytest.approx(
                losses.mmd2_biased(x, y, spec), rel=1e-12
            )

    def test_gradient_against_oracle(self):
        x0 = RNG.normal(size=(8, 3))
        y = RNG.normal(size=(6, 3)) + 0.5
        for spec in (KernelSpec(), KernelSpec(kind="gaussian")):

            def fn(vals, spec=spec):
                return losses.mmd2_biased(vals["x"], y, spec)

            tape = Tape()
            node = tape.input(x0)
            (g,) = tape.gradient(losses.mmd2_biased(node, y, spec), [node])
            oracle = ad.finite_difference(fn, {"x": x0})
            np.testing.assert_allclose(g, oracle["x"], rtol=1e-4, atol=1e-8)

    @settings(deadline=None, max_examples=30)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 12), st.integers(2, 12))
    def test_symmetry_and_nonnegativity(self, seed, n, m):
        r = np.random.default_rng(seed)
        x = r.normal(size=(n, 2))
        y = r.normal(size=(m, 2)) + r.normal()
        for spec in (KernelSpec(), KernelSpec(kind="gaussian")):
            a = losses.mmd2_biased(x, y, spec)
            b = losses.mmd2_biased(y, x, spec)
            assert a == pytest.approx(b, rel=1e-10, abs=1e-12)
            assert a >= -1e-10


class TestNormalizePair:
    def test_model_range_maps_to_unit_interval(self):
        m = np.array([[2.0], [4.0], [6.0]])
        e = np.array([[3.0], [8.0]])
        nm, ne = losses.normalize_pair(m, e)
        np.testing.assert_allclose(nm, [[0.0], [0.5], [1.0]])
        np.testing.assert_allclose(ne, [[0.25], [1.5]])  # expert may leave [0,1]

    def test_degenerate_span_sends_both_to_zero(self):
        m = np.full((3, 1), 5.0)
        e = np.array([[1.0], [2.0]])
        nm, ne = losses.normalize_pair(m, e)
        np.testing.assert_array_equal(nm, 0.0)
        np.testing.assert_array_equal(ne, 0.0)

    def test_node_side_gradient_uses_detached_range(self):
        # the min and max enter the graph as constants, so the reference
        # derivative applies the base affine map frozen, not re-derived
        m0 = np.array([[1.0], [2.0], [5.0]])
        e = np.array([[3.0]])
        lo, span = 1.0, 4.0

        def fn_frozen(vals):
            return losses.mmd2_biased((vals["m"] - lo) / span, (e - lo) / span)

        tape = Tape()
        node = tape.input(m0)
        nm, ne = losses.normalize_pair(node, e)
        out = losses.mmd2_biased(nm, ne)
        (g,) = tape.gradient(out, [node])
        oracle = ad.finite_difference(fn_frozen, {"m": m0})
        np.testing.assert_allclose(g, oracle["m"], rtol=1e-4, atol=1e-8)
        assert np.any(g != 0.0)


class TestDynamicWeights:
    def test_single_epoch_gives_ones(self):
        np.testing.assert_array_equal(losses.dwa_weights(np.ones((1, 4))), np.ones(4))

    def test_equal_ratios_give_ones(self):
        hist = np.array([[2.0, 4.0, 8.0], [1.0, 2.0, 4.0]])  # every ratio 0.5
        np.testing.assert_allclose(losses.dwa_weights(hist), np.ones(3), atol=1e-12)

    def test_weights_sum_to_component_count(self):
        hist = np.abs(RNG.normal(size=(6, 5))) + 0.1
        w = losses.dwa_weights(hist)
        assert w.sum() == pytest.approx(5.0, rel=1e-12)
        assert np.all(w > 0)

    def test_hand_computed_two_component_case(self):
        # ratios (0, 10) at temperature 1.6: softmax gap 10/1.6 = 6.25
        hist = np.array([[1.0, 1.0], [0.0, 10.0]])
        w = losses.dwa_weights(hist, temperature=1.6)
        denom = 1.0 + np.exp(6.25)
        np.testing.assert_allclose(w, [2.0 / denom, 2.0 * np.exp(6.25) / denom], rtol=1e-6)

    def test_slower_descent_earns_more_weight(self):
        hist = np.array([[1.0, 1.0], [0.2, 0.9]])
        w = losses.dwa_weights(hist)
        assert w[1] > w[0]

    def test_nonpositive_initial_loss_excluded_with_warning(self):
        hist = np.array([[0.0, 1.0, 2.0], [0.5, 0.5, 1.0]])
        with pytest.warns(UserWarning):
            w = losses.dwa_weights(hist)
        assert w[0] == 1.0
        assert w[1] + w[2] == pytest.approx(2.0, rel=1e-12)

    def test_history_must_be_two_dimensional(self):
        with pytest.raises(LossConfigError):
            losses.dwa_weights(np.ones(3))


class TestTotalLoss:
    def test_weighted_sum(self):
        tape = Tape()
        parts = [tape.input(np.array(v)) for v in (1.0, 2.0, 3.0)]
        out = losses.total_loss(parts, np.array([1.0, 0.5, 2.0]))
        assert float(out.values) == pytest.approx(1.0 + 1.0 + 6.0)

    def test_weights_stay_constant_in_graph(self):
        tape = Tape()
        x = tape.input(np.array(3.0))
        out = losses.total_loss([x, ad.mul(x, x)], np.array([2.0, 1.0]))
        (g,) = tape.gradient(out, [x])
        assert g == pytest.approx(2.0 + 2 * 3.0)

    def test_count_mismatch(self):
        tape = Tape()
        with pytest.raises(LossConfigError):
            losses.total_loss([tape.input(np.array(1.0))], np.ones(2))
