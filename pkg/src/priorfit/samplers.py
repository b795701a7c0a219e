"""Reparameterized samplers: deterministic differentiable functions of
distribution parameters and externally supplied base noise.

Noise comes from named streams. A stream is addressed by (seed, stream-id)
where the stream-id is any tuple of ints/strings (epoch, batch element,
purpose, ...); the address is hashed into a PCG64 seed, so banks for distinct
stream-ids can be created in any order, or in parallel, with bit-identical
results. Uniform draws are clamped to [1e-12, 1-1e-12] before inverse-CDF
transforms.

Parameters may be plain floats/arrays or autodiff Nodes; the samplers
broadcast like numpy either way.
"""

import hashlib

import numpy as np
from scipy import special

from . import autodiff
from .autodiff import Node

U_LO = 1e-12
U_HI = 1.0 - 1e-12

# rows drawn per internal block of relaxed_count; value-invariant (sequential
# stream reads), only bounds the transient (rows x categories) buffer
_REL_BLOCK_ROWS = 4096


class ParameterDomainError(ValueError):
    """A distribution parameter is outside its domain."""


class SamplerError(ValueError):
    pass


def _values(x):
    return x.values if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _is_node(*xs):
    return any(isinstance(x, Node) for x in xs)


# ------------------------------------------------------------- noise streams

def _normalize_stream(stream):
    if not isinstance(stream, tuple):
        stream = (stream,)
    out = []
    for part in stream:
        if isinstance(part, (int, np.integer)):
            out.append(int(part))
        elif isinstance(part, str):
            out.append(part)
        else:
            raise SamplerError("stream-id parts must be ints or strings, got %r" % (part,))
    return tuple(out)


def stream_generator(seed, stream):
    """A fresh PCG64 generator for one (seed, stream-id) address."""
    payload = repr((int(seed),) + _normalize_stream(stream)).encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=16).digest()
    ss = np.random.SeedSequence(int.from_bytes(digest, "big"))
    return np.random.Generator(np.random.PCG64(ss))


def uniform_noise(seed, stream, shape):
    u = stream_generator(seed, stream).random(shape)
    return np.clip(u, U_LO, U_HI)


def normal_noise(seed, stream, shape):
    return stream_generator(seed, stream).standard_normal(shape)


def gumbel_noise(seed, stream, shape):
    u = uniform_noise(seed, stream, shape)
    return -np.log(-np.log(u))


class NoiseBank:
    """Pre-drawn base noise for one (seed, stream-id) pair.

    Each family lives in its own substream, so a bank is fully determined by
    (seed, stream-id, shape) independent of construction order.
    """

    def __init__(self, seed, stream, uniform=None, normal=None, gumbel=None):
        self.seed = int(seed)
        self.stream = _normalize_stream(stream)
        self.u = uniform_noise(seed, self.stream + ("u",), uniform) if uniform is not None else None
        self.eps = normal_noise(seed, self.stream + ("eps",), normal) if normal is not None else None
        self.g = gumbel_noise(seed, self.stream + ("g",), gumbel) if gumbel is not None else None


# ----------------------------------------------------------------- samplers

def _require_positive(name, value, op):
    v = _values(value)
    if not np.all(v > 0.0):
        raise ParameterDomainError("%s: %s must be positive" % (op, name))


def sample_normal(mu, sigma, eps):
    """mu + sigma * eps."""
    _require_positive("sigma", sigma, "sample_normal")
    return mu + sigma * np.asarray(eps, dtype=np.float64)


def sample_exponential(nu, u):
    """Inverse-CDF exponential with rate nu: -log(1-u)/nu."""
    _require_positive("nu", nu, "sample_exponential")
    e = -np.log1p(-np.asarray(u, dtype=np.float64))
    return e / nu


def sample_exponential_mean(nu, n, u):
    """Mean of n iid Exponential(nu) variates: an exact Gamma(n, n*nu) draw.

    u has shape (..., n); the constant sum of the base exponentials is
    reduced before the rate enters, so the graph never holds the n-axis.
    """
    _require_positive("nu", nu, "sample_exponential_mean")
    n = int(n)
    if n < 1:
        raise ParameterDomainError("sample_exponential_mean: n must be >= 1")
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != n:
        raise SamplerError("sample_exponential_mean: trailing noise axis must have length n")
    total = (-np.log1p(-u)).sum(axis=-1)
    return total / (n * nu)


def sample_halfnormal(omega, u):
    """omega * Phi^{-1}(0.5 + 0.5u), the inverse-CDF half-normal."""
    _require_positive("omega", omega, "sample_halfnormal")
    c = special.ndtri(0.5 + 0.5 * np.asarray(u, dtype=np.float64))
    return omega * c


def sample_weibull(alpha, beta, u):
    """beta * (-log(1-u))^(1/alpha), differentiable in both parameters."""
    _require_positive("alpha", alpha, "sample_weibull")
    _require_positive("beta", beta, "sample_weibull")
    base = -np.log1p(-np.asarray(u, dtype=np.float64))
    if _is_node(alpha, beta):
        log_base = np.log(base)
        return beta * autodiff.exp((1.0 / alpha) * log_base)
    return beta * base ** (1.0 / np.asarray(alpha, dtype=np.float64))


def sample_mvnormal2(tau0, tau1, rho, eps1, eps2):
    """Cholesky form of a zero-mean bivariate normal with sds tau0, tau1 and
    correlation rho. rho carries no gradient (it is sampled, not learned)."""
    _require_positive("tau0", tau0, "sample_mvnormal2")
    _require_positive("tau1", tau1, "sample_mvnormal2")
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(np.abs(rho) >= 1.0):
        raise ParameterDomainError("sample_mvnormal2: |rho| must be < 1")
    eps1 = np.asarray(eps1, dtype=np.float64)
    eps2 = np.asarray(eps2, dtype=np.float64)
    u0 = tau0 * eps1
    u1 = tau1 * (rho * eps1 + np.sqrt(1.0 - rho * rho) * eps2)
    return u0, u1


def sample_lkj2(u):
    """LKJ(1) on a 2x2 correlation matrix: rho uniform on (-1, 1)."""
    return 2.0 * np.asarray(u, dtype=np.float64) - 1.0


def gumbel_softmax(log_probs, tau, g):
    """Relaxed one-hot: softmax((log_probs + g)/tau) over the trailing axis."""
    if tau <= 0:
        raise ParameterDomainError("gumbel_softmax: tau must be positive")
    vals = _values(log_probs)
    if np.any(np.isneginf(vals).all(axis=-1)):
        raise SamplerError("gumbel_softmax: a row has all -inf logits")
    g = np.asarray(g, dtype=np.float64)
    if isinstance(log_probs, Node):
        return autodiff.softmax((log_probs + g) / float(tau))
    shifted = (vals + g) / float(tau)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def soft_count(simplex, support=None):
    """sum_k simplex_k * k; equals the hard sample for a one-hot simplex."""
    vals = _values(simplex)
    sums = vals.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise SamplerError("soft_count: simplex rows must sum to 1 within 1e-9")
    if support is None:
        support = np.arange(vals.shape[-1], dtype=np.float64)
    else:
        support = np.asarray(support, dtype=np.float64)
    if isinstance(simplex, Node):
        return autodiff.reduce_sum(simplex * support, axis=-1)
    return (vals * support).sum(axis=-1)


def _binom_log_coeff(trials):
    k = np.arange(trials + 1, dtype=np.float64)
    return special.gammaln(trials + 1.0) - special.gammaln(k + 1.0) - special.gammaln(trials - k + 1.0)


def binomial_logits(trials, theta):
    """Log pmf of Binomial(trials, theta) over counts 0..trials.

    theta is clamped into [1e-7, 1-1e-7] first; entry k is
    log C(trials, k) + k log theta + (trials-k) log(1-theta).
    """
    trials = int(trials)
    if trials < 1:
        raise ParameterDomainError("binomial_logits: trials must be >= 1")
    k = np.arange(trials + 1, dtype=np.float64)
    log_coeff = _binom_log_coeff(trials)
    if isinstance(theta, Node):
        th = autodiff.clip(theta, 1e-7, 1.0 - 1e-7)
        th = autodiff.reshape(th, th.shape + (1,))
        one_m = 1.0 - th
        return log_coeff + k * autodiff.log(th) + (trials - k) * autodiff.log(one_m)
    th = np.clip(np.asarray(theta, dtype=np.float64), 1e-7, 1.0 - 1e-7)[..., None]
    return log_coeff + k * np.log(th) + (trials - k) * np.log(1.0 - th)


def poisson_truncated_logits(theta, t_upper):
    """Unnormalized log pmf of Poisson(theta) on the truncated support
    0..t_upper; softmax renormalizes."""
    t_upper = int(t_upper)
    if t_upper < 1:
        raise ParameterDomainError("poisson_truncated_logits: t_upper must be >= 1")
    _require_positive("theta", theta, "poisson_truncated_logits")
    k = np.arange(t_upper + 1, dtype=np.float64)
    log_fact = special.gammaln(k + 1.0)
    if isinstance(theta, Node):
        th = autodiff.reshape(theta, theta.shape + (1,))
        return k * autodiff.log(th) - th - log_fact
    th = np.asarray(theta, dtype=np.float64)[..., None]
    return k * np.log(th) - th - log_fact


# ----------------------------------------------------- fused relaxed counts

def relaxed_count(theta, family, tau, seed, streams, trials=None, t_upper=None):
    """Gumbel-Softmax count draw, fused and streamed.

    Equivalent to composing binomial_logits / poisson_truncated_logits with
    gumbel_softmax and soft_count, but the (batch, S, rows, categories) array
    is never materialized: Gumbel noise is read sequentially per leading-axis
    element from its own stream, in fixed row blocks, and only the soft count
    z = sum_k y_k k and second moment m2 = sum_k y_k k^2 are kept. Because the
    per-category logit is affine in k (slope dlog(theta) for Poisson,
    d(theta)/(theta(1-theta)) for Binomial), the gradient is
    dz/dtheta = Var_y(k) * slope / tau with Var_y(k) = m2 - z^2, so backward
    needs no category-axis data either.

    theta: (B, ...) parameter (Node or array); streams: one stream-id per
    leading-axis element b, so values do not depend on how the batch is
    chunked across workers.
    """
    if tau <= 0:
        raise ParameterDomainError("relaxed_count: tau must be positive")
    if family == "binomial":
        if trials is None or int(trials) < 1:
            raise ParameterDomainError("relaxed_count: binomial needs trials >= 1")
        n_cat = int(trials) + 1
    elif family == "poisson":
        if t_upper is None or int(t_upper) < 1:
            raise ParameterDomainError("relaxed_count: poisson needs t_upper >= 1")
        _require_positive("theta", theta, "relaxed_count")
        n_cat = int(t_upper) + 1
    else:
        raise SamplerError("relaxed_count: unknown family %r" % (family,))

    vals = _values(theta)
    if len(streams) != vals.shape[0]:
        raise SamplerError("relaxed_count: need one noise stream per leading-axis element")
    k = np.arange(n_cat, dtype=np.float64)
    k2 = k * k
    log_fact = special.gammaln(k + 1.0)
    if family == "binomial":
        log_coeff = _binom_log_coeff(int(trials))

    z = np.empty(vals.shape)
    m2 = np.empty(vals.shape)
    inv_tau = 1.0 / float(tau)
    for b, stream in enumerate(streams):
        gen = stream_generator(seed, stream)
        flat = vals[b].reshape(-1)
        zf = z[b].reshape(-1)
        m2f = m2[b].reshape(-1)
        for lo in range(0, flat.size, _REL_BLOCK_ROWS):
            hi = min(lo + _REL_BLOCK_ROWS, flat.size)
            th = flat[lo:hi, None]
            if family == "binomial":
                th = np.clip(th, 1e-7, 1.0 - 1e-7)
                logits = log_coeff + k * np.log(th) + (int(trials) - k) * np.log(1.0 - th)
            else:
                logits = k * np.log(th) - th - log_fact
            u = np.clip(gen.random((hi - lo, n_cat)), U_LO, U_HI)
            np.log(u, out=u)
            np.negative(u, out=u)
            np.log(u, out=u)  # u now holds -gumbel; subtracting adds the noise
            logits -= u
            logits -= logits.max(axis=-1, keepdims=True)
            logits *= inv_tau
            np.exp(logits, out=logits)
            logits /= logits.sum(axis=-1, keepdims=True)
            zf[lo:hi] = logits @ k
            m2f[lo:hi] = logits @ k2

    if not isinstance(theta, Node):
        return z

    var = m2 - z * z
    if family == "binomial":
        tv = np.clip(vals, 1e-7, 1.0 - 1e-7)
        # gradient is zero where the clamp is active, matching clip + logits
        interior = (vals > 1e-7) & (vals < 1.0 - 1e-7)
        slope = interior / (tv * (1.0 - tv))
    else:
        slope = 1.0 / vals
    dz = var * slope * inv_tau

    return autodiff._make(theta.tape, "relaxed_count", z, [theta], [lambda g, d=dz: g * d])
