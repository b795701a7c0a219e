"""Discrepancy losses between model and expert statistics.

The core distance is the biased squared maximum mean discrepancy with an
energy kernel (default) or a gaussian-mixture kernel. Multi-statistic totals
use dynamic weight averaging over per-statistic epoch losses; the weights are
constants inside the training graph.
"""

from dataclasses import dataclass

import warnings

import numpy as np

from . import autodiff
from .autodiff import Node

DWA_TEMPERATURE = 1.6


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "energy"
    sigmas: tuple = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if self.kind not in ("energy", "gaussian"):
            raise LossConfigError("unknown kernel kind %r" % (self.kind,))
        if self.kind == "gaussian":
            s = tuple(float(v) for v in self.sigmas)
            if not s or any(v <= 0 for v in s):
                raise LossConfigError("gaussian kernel needs positive sigmas")
            object.__setattr__(self, "sigmas", s)


def _row_matrix(x):
    return x if isinstance(x, Node) else np.atleast_2d(np.asarray(x, dtype=np.float64))


def _reshape_any(x, shape):
    return autodiff.reshape(x, shape) if isinstance(x, Node) else np.reshape(x, shape)


def kernel_eval(x, y, kernel=KernelSpec()):
    """Kernel matrix between row sets x (n,d) and y (m,d); rows are samples.

    energy   : k(a,b) = -||a-b||      (negative-distance kernel)
    gaussian : k(a,b) = sum_i exp(-||a-b||^2 / (2 sigma_i^2))

    Nodes on either side yield a Node; the energy kernel uses subgradient 0
    at coincident points (the diagonal of k(x,x)).
    """
    x, y = _row_matrix(x), _row_matrix(y)
    if x.shape[-1] != y.shape[-1]:
        raise LossConfigError(
            "kernel_eval: dimension mismatch %d vs %d" % (x.shape[-1], y.shape[-1])
        )
    n, m, d = x.shape[0], y.shape[0], x.shape[-1]
    is_node = isinstance(x, Node) or isinstance(y, Node)
    if kernel.kind == "energy" and d == 1:
        diff = _reshape_any(x, (n, 1)) - _reshape_any(y, (1, m))
        return -autodiff.absolute(diff) if is_node else -np.abs(diff)
    diff = _reshape_any(x, (n, 1, d)) - _reshape_any(y, (1, m, d))
    if kernel.kind == "energy":
        return -autodiff.norm_last(diff) if is_node else -np.linalg.norm(diff, axis=-1)
    if is_node:
        sq = autodiff.reduce_sum(diff * diff, axis=-1)
        total = None
        for s in kernel.sigmas:
            term = autodiff.exp(sq * (-1.0 / (2.0 * s * s)))
            total = term if total is None else total + term
        return total
    sq = np.sum(diff * diff, axis=-1)
    return sum(np.exp(-sq / (2.0 * s * s)) for s in kernel.sigmas)


def mmd2_biased(x, y, kernel=KernelSpec()):
    """Biased squared MMD between sample rows x (n,d) and y (m,d).

    mean(k(x,x)) + mean(k(y,y)) - 2 mean(k(x,y)), full double sums.
    """
    def term_mean(k):
        return autodiff.reduce_mean(k) if isinstance(k, Node) else float(np.mean(k))

    kxx = term_mean(kernel_eval(x, x, kernel))
    kyy = term_mean(kernel_eval(y, y, kernel))
    kxy = term_mean(kernel_eval(x, y, kernel))
    total = kxx + kyy - 2.0 * kxy
    return total if isinstance(total, Node) else float(total)


def normalize_pair(model_vals, expert_vals):
    """Affine map of both sides onto [0,1] using the model side's range.

    The min and max come from the model-side values as plain numbers, so the
    map is a constant inside the graph. A degenerate range (< 1e-12) sends
    both sides to zero.
    """
    mv = model_vals.values if isinstance(model_vals, Node) else np.asarray(model_vals, float)
    lo = float(np.min(mv))
    hi = float(np.max(mv))
    span = hi - lo
    if span < 1e-12:
        if isinstance(model_vals, Node):
            return model_vals * 0.0, np.zeros_like(np.asarray(expert_vals, float))
        return np.zeros_like(mv), np.zeros_like(np.asarray(expert_vals, float))
    scale = 1.0 / span
    m = (model_vals - lo) * scale
    e = (np.asarray(expert_vals, dtype=np.float64) - lo) * scale
    return m, e


def dwa_weights(loss_history, temperature=DWA_TEMPERATURE):
    """Dynamic weight averaging over M per-statistic loss series.

    loss_history: (epochs_so_far, M) array of epoch-level component losses.
    Fewer than 2 epochs: all-ones. Otherwise the ratio of last epoch's loss
    to the first epoch's feeds a softmax at the given temperature, scaled so
    the weights sum to M. Components whose first-epoch loss is not positive
    are excluded from the softmax (weight fixed at 1) with a warning.
    """
    hist = np.asarray(loss_history, dtype=np.float64)
    if hist.ndim != 2:
        raise LossConfigError("loss_history must be 2-D (epochs, components)")
    m = hist.shape[1]
    if hist.shape[0] < 2:
        return np.ones(m)
    start = hist[0]
    prev = hist[-1]
    ok = start > 0.0
    weights = np.ones(m)
    if not np.all(ok):
        warnings.warn(
            "dynamic weighting: %d component(s) with nonpositive initial loss kept at weight 1"
            % int(np.sum(~ok))
        )
    if np.sum(ok) > 0:
        gamma = prev[ok] / start[ok]
        z = np.exp(gamma / temperature - np.max(gamma / temperature))
        weights[ok] = np.sum(ok) * z / np.sum(z)
    return weights


def total_loss(component_losses, weights):
    """Weighted sum of per-statistic losses; weights enter as constants."""
    w = np.asarray(weights, dtype=np.float64)
    if len(component_losses) != w.size:
        raise LossConfigError(
            "got %d losses but %d weights" % (len(component_losses), w.size)
        )
    total = None
    for wi, li in zip(w, component_losses):
        term = li * float(wi)
        total = term if total is None else total + term
    return total
