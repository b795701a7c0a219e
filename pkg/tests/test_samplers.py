"""Noise addressing and reparameterized samplers against closed-form oracles."""

import numpy as np
import pytest
from scipy import special, stats

from priorfit import autodiff as ad
from priorfit import samplers as sp
from priorfit.autodiff import Tape
from priorfit.samplers import ParameterDomainError, SamplerError

SEED = 77


class TestNoiseStreams:
    def test_same_address_reproduces(self):
        a = sp.normal_noise(SEED, ("model", 3, "coef"), (4, 5))
        b = sp.normal_noise(SEED, ("model", 3, "coef"), (4, 5))
        np.testing.assert_array_equal(a, b)

    def test_distinct_addresses_decorrelate(self):
        a = sp.normal_noise(SEED, ("model", 3), (1000,))
        b = sp.normal_noise(SEED, ("model", 4), (1000,))
        c = sp.normal_noise(SEED + 1, ("model", 3), (1000,))
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.1
        assert abs(np.corrcoef(a, c)[0, 1]) < 0.1

    def test_scalar_stream_equals_singleton_tuple(self):
        np.testing.assert_array_equal(
            sp.uniform_noise(SEED, 9, (3,)), sp.uniform_noise(SEED, (9,), (3,))
        )

    def test_bad_stream_part_rejected(self):
        with pytest.raises(SamplerError):
            sp.uniform_noise(SEED, (1.5,), (3,))

    def test_uniform_stays_inside_open_interval(self):
        u = sp.uniform_noise(SEED, ("u",), (100000,))
        assert u.min() >= sp.U_LO and u.max() <= sp.U_HI

    def test_noise_bank_families_live_in_substreams(self):
        bank = sp.NoiseBank(SEED, ("b", 0), uniform=(3,), normal=(4,), gumbel=(5,))
        np.testing.assert_array_equal(bank.u, sp.uniform_noise(SEED, ("b", 0, "u"), (3,)))
        np.testing.assert_array_equal(bank.eps, sp.normal_noise(SEED, ("b", 0, "eps"), (4,)))
        np.testing.assert_array_equal(bank.g, sp.gumbel_noise(SEED, ("b", 0, "g"), (5,)))
        assert sp.NoiseBank(SEED, ("b", 0)).u is None


class TestContinuousSamplers:
    def test_normal_is_affine_in_noise(self):
        eps = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_allclose(sp.sample_normal(3.0, 0.5, eps), 3.0 + 0.5 * eps)
        with pytest.raises(ParameterDomainError):
            sp.sample_normal(0.0, 0.0, eps)

    def test_exponential_inverse_cdf(self):
        u = np.array([0.1, 0.5, 0.9])
        np.testing.assert_allclose(sp.sample_exponential(2.0, u), -np.log1p(-u) / 2.0)

    def test_exponential_mean_is_mean_of_exponentials(self):
        u = sp.uniform_noise(SEED, ("em",), (6, 40))
        got = sp.sample_exponential_mean(0.7, 40, u)
        want = sp.sample_exponential(0.7, u).mean(axis=-1)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_exponential_mean_follows_gamma_law(self):
        # mean of n rate-nu exponentials is Gamma(n, rate n*nu)
        nu, n = 0.04, 300
        u = sp.uniform_noise(SEED, ("gamma",), (20000, n))
        draws = sp.sample_exponential_mean(nu, n, u)
        p = stats.kstest(draws, stats.gamma(a=n, scale=1.0 / (n * nu)).cdf).pvalue
        assert p > 0.01

    def test_exponential_mean_validates_axis_and_n(self):
        u = np.full((3, 5), 0.5)
        with pytest.raises(SamplerError):
            sp.sample_exponential_mean(1.0, 4, u)
        with pytest.raises(ParameterDomainError):
            sp.sample_exponential_mean(1.0, 0, np.zeros((3, 0)))

    def test_halfnormal_quantile_form_and_moment(self):
        u = np.array([0.0, 0.5, 0.99])
        np.testing.assert_allclose(
            sp.sample_halfnormal(1.0, u), special.ndtri(0.5 + 0.5 * u), rtol=1e-12
        )
        big = sp.sample_halfnormal(2.5, sp.uniform_noise(SEED, ("hn",), (200000,)))
        assert np.all(big >= 0)
        assert big.mean() == pytest.approx(2.5 * np.sqrt(2 / np.pi), rel=5e-3)

    def test_weibull_distribution_and_node_parity(self):
        alpha, beta = 5.5, 240.0
        u = sp.uniform_noise(SEED, ("wb",), (20000,))
        draws = sp.sample_weibull(alpha, beta, u)
        p = stats.kstest(draws, stats.weibull_min(c=alpha, scale=beta).cdf).pvalue
        assert p > 0.01
        tape = Tape()
        node = sp.sample_weibull(tape.input(np.array(alpha)), tape.input(np.array(beta)), u[:50])
        np.testing.assert_allclose(node.values, draws[:50], rtol=1e-12)

    def test_weibull_gradients(self):
        u = sp.uniform_noise(SEED, ("wbg",), (30,))

        def fn(vals):
            t = Tape()
            a, b = t.input(vals["a"]), t.input(vals["b"])
            out = ad.reduce_mean(sp.sample_weibull(a, b, u))
            return float(out.values)

        tape = Tape()
        a, b = tape.input(np.array(5.5)), tape.input(np.array(240.0))
        out = ad.reduce_mean(sp.sample_weibull(a, b, u))
        ga, gb = tape.gradient(out, [a, b])
        oracle = ad.finite_difference(fn, {"a": np.array(5.5), "b": np.array(240.0)})
        assert ga == pytest.approx(float(oracle["a"]), rel=1e-5)
        assert gb == pytest.approx(float(oracle["b"]), rel=1e-5)

    def test_mvnormal2_cholesky_identity_and_cov(self):
        tau0, tau1, rho = 1.4, 0.6, -0.35
        e1 = sp.normal_noise(SEED, ("e1",), (200000,))
        e2 = sp.normal_noise(SEED, ("e2",), (200000,))
        u0, u1 = sp.sample_mvnormal2(tau0, tau1, rho, e1, e2)
        np.testing.assert_allclose(u0, tau0 * e1, rtol=1e-12)
        np.testing.assert_allclose(
            u1, tau1 * (rho * e1 + np.sqrt(1 - rho**2) * e2), rtol=1e-12
        )
        cov = np.cov(u0, u1)
        assert cov[0, 0] == pytest.approx(tau0**2, rel=0.02)
        assert cov[1, 1] == pytest.approx(tau1**2, rel=0.02)
        assert cov[0, 1] == pytest.approx(rho * tau0 * tau1, rel=0.05)

    def test_mvnormal2_rejects_degenerate_correlation(self):
        with pytest.raises(ParameterDomainError):
            sp.sample_mvnormal2(1.0, 1.0, 1.0, 0.0, 0.0)

    def test_lkj2_maps_unit_interval_onto_correlations(self):
        u = np.array([0.0, 0.25, 1.0])
        np.testing.assert_allclose(sp.sample_lkj2(u), [-1.0, -0.5, 1.0])


class TestCategoricalRelaxation:
    def test_simplex_rows_sum_to_one(self):
        logits = sp.normal_noise(SEED, ("lg",), (50, 12))
        g = sp.gumbel_noise(SEED, ("g",), (50, 12))
        y = sp.gumbel_softmax(logits, 1.0, g)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
        with pytest.raises(ParameterDomainError):
            sp.gumbel_softmax(logits, 0.0, g)

    def test_argmax_is_temperature_free(self):
        logits = sp.normal_noise(SEED, ("lg2",), (200, 8))
        g = sp.gumbel_noise(SEED, ("g2",), (200, 8))
        hard = np.argmax(logits + g, axis=-1)
        for tau in (0.01, 1.0, 10.0):
            np.testing.assert_array_equal(
                np.argmax(sp.gumbel_softmax(logits, tau, g), axis=-1), hard
            )

    def test_low_temperature_approaches_one_hot(self):
        logits = np.log(np.array([[0.7, 0.2, 0.1]]))
        g = sp.gumbel_noise(SEED, ("g3",), (1, 3))
        y = sp.gumbel_softmax(logits, 1e-4, g)
        assert y.max() == pytest.approx(1.0, abs=1e-12)

    def test_all_neginf_row_rejected(self):
        logits = np.full((1, 4), -np.inf)
        with pytest.raises(SamplerError):
            sp.gumbel_softmax(logits, 1.0, np.zeros((1, 4)))

    def test_soft_count_reads_one_hot_exactly(self):
        y = np.zeros((2, 6))
        y[0, 4] = 1.0
        y[1, 1] = 1.0
        np.testing.assert_array_equal(sp.soft_count(y), [4.0, 1.0])
        np.testing.assert_array_equal(sp.soft_count(y, support=10 * np.arange(6)), [40.0, 10.0])
        with pytest.raises(SamplerError):
            sp.soft_count(0.9 * y)

    def test_binomial_logits_match_scipy(self):
        theta = np.array([0.03, 0.4, 0.97])
        got = sp.binomial_logits(100, theta)
        k = np.arange(101)
        want = stats.binom(100, theta[:, None]).logpmf(k)
        np.testing.assert_allclose(got, want, rtol=1e-10)
        assert np.all(np.isfinite(sp.binomial_logits(100, np.array([0.0, 1.0]))))

    def test_poisson_truncated_logits_renormalize_to_truncated_pmf(self):
        theta, t_u = 18.0, 110
        logits = sp.poisson_truncated_logits(np.array([theta]), t_u)
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        k = np.arange(t_u + 1)
        want = stats.poisson(theta).pmf(k)
        want /= want.sum()
        np.testing.assert_allclose(probs[0], want, rtol=1e-10)


class TestRelaxedCount:
    def test_fused_matches_composed_path(self):
        # same per-element stream, so noise consumption must line up exactly
        theta = np.array([[3.0, 18.0, 60.0], [7.5, 30.0, 100.0]])
        streams = [("lik", 0), ("lik", 1)]
        tau, t_u = 0.7, 110
        fused = sp.relaxed_count(theta, "poisson", tau, SEED, streams, t_upper=t_u)
        for b, stream in enumerate(streams):
            gen = sp.stream_generator(SEED, stream)
            u = np.clip(gen.random((3, t_u + 1)), sp.U_LO, sp.U_HI)
            g = -np.log(-np.log(u))
            logits = sp.poisson_truncated_logits(theta[b], t_u)
            y = sp.gumbel_softmax(logits, tau, g)
            np.testing.assert_allclose(fused[b], sp.soft_count(y), rtol=1e-9)

    def test_fused_matches_composed_binomial(self):
        theta = np.array([[0.05, 0.4, 0.9]])
        fused = sp.relaxed_count(theta, "binomial", 1.0, SEED, [("lik",)], trials=100)
        gen = sp.stream_generator(SEED, ("lik",))
        u = np.clip(gen.random((3, 101)), sp.U_LO, sp.U_HI)
        g = -np.log(-np.log(u))
        y = sp.gumbel_softmax(sp.binomial_logits(100, theta[0]), 1.0, g)
        np.testing.assert_allclose(fused[0], sp.soft_count(y), rtol=1e-9)

    def test_value_independent_of_chunking(self):
        theta = sp.uniform_noise(SEED, ("th",), (4, 9)) * 20 + 1
        streams = [("lik", b) for b in range(4)]
        whole = sp.relaxed_count(theta, "poisson", 1.0, SEED, streams, t_upper=40)
        parts = [
            sp.relaxed_count(theta[b : b + 1], "poisson", 1.0, SEED, streams[b : b + 1], t_upper=40)
            for b in range(4)
        ]
        np.testing.assert_array_equal(whole, np.concatenate(parts, axis=0))

    def test_gradient_matches_finite_differences(self):
        theta0 = np.array([[6.0, 18.0], [45.0, 90.0]])
        streams = [("lik", 0), ("lik", 1)]

        def fn(vals):
            out = sp.relaxed_count(vals["t"], "poisson", 1.0, SEED, streams, t_upper=110)
            return float(out.sum())

        tape = Tape()
        node = tape.input(theta0)
        out = sp.relaxed_count(node, "poisson", 1.0, SEED, streams, t_upper=110)
        (g,) = tape.gradient(ad.reduce_sum(out), [node])
        oracle = ad.finite_difference(fn, {"t": theta0}, h=1e-5)
        np.testing.assert_allclose(g, oracle["t"], rtol=1e-4, atol=1e-7)

    def test_gradient_matches_finite_differences_binomial(self):
        theta0 = np.array([[0.08, 0.35, 0.8]])

        def fn(vals):
            out = sp.relaxed_count(vals["t"], "binomial", 1.0, SEED, [("lik",)], trials=100)
            return float(out.sum())

        tape = Tape()
        node = tape.input(theta0)
        out = sp.relaxed_count(node, "binomial", 1.0, SEED, [("lik",)], trials=100)
        (g,) = tape.gradient(ad.reduce_sum(out), [node])
        oracle = ad.finite_difference(fn, {"t": theta0}, h=1e-6)
        np.testing.assert_allclose(g, oracle["t"], rtol=1e-3, atol=1e-6)

    def test_stream_count_must_match_batch(self):
        with pytest.raises(SamplerError):
            sp.relaxed_count(np.ones((2, 3)), "poisson", 1.0, SEED, [("a",)], t_upper=5)
        with pytest.raises(ParameterDomainError):
            sp.relaxed_count(np.ones((1, 3)), "poisson", 0.0, SEED, [("a",)], t_upper=5)
        with pytest.raises(ParameterDomainError):
            sp.relaxed_count(np.ones((1, 3)), "binomial", 1.0, SEED, [("a",)])
        with pytest.raises(SamplerError):
            sp.relaxed_count(np.ones((1, 3)), "geometric", 1.0, SEED, [("a",)], t_upper=5)
