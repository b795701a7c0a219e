"""Generative model programs mapping hyperparameters to target-quantity draws.

A ModelSpec bundles a fixed design matrix, one parametric prior per model
parameter, a likelihood with link, and the list of target quantities whose
simulated draws the training loop compares against expert statistics.
forward() produces, for every target, a (batch, replicates) Node of draws
that is differentiable in the hyperparameters.

Two execution routes produce identical values: a generic route that
materializes per-observation draws, and collapsed routes for normal
likelihoods that reduce the observation axis into constant noise aggregates
(cell means, variance cross terms) so the graph holds only (batch, S)
arrays. Route equality is an algebraic identity and is covered by tests;
force_generic=True pins the generic route.
"""

from dataclasses import dataclass

import json
import numpy as np

from . import autodiff, samplers
from .autodiff import Node
from .elicitation import ElicitationTechnique

LIKELIHOODS = ("normal", "binomial", "poisson", "weibull")
LINKS = ("identity", "logit", "log")
PRIOR_FAMILIES = ("normal", "exponential_mean", "halfnormal")
TARGET_KINDS = (
    "group_mean",
    "diff_group_means",
    "grand_mean",
    "design_point",
    "r2",
    "parameter",
)
R2_EPS = 1e-12


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    """One parametric prior and the hyperparameter slots it owns.

    role "coef" consumes the next design column, "group_sd" is a varying-
    effect scale, "noise" is the likelihood dispersion parameter. The
    exponential_mean family draws the mean of n_terms iid exponentials,
    an exact Gamma(n, n*rate) variate with much smoother gradients than a
    single exponential draw.
    """

    param: str
    family: str
    hyper: tuple
    role: str = "coef"
    n_terms: int = 1

    def __post_init__(self):
        if self.family not in PRIOR_FAMILIES:
            raise ModelSpecError("unknown prior family %r" % (self.family,))
        expected = 2 if self.family == "normal" else 1
        if len(self.hyper) != expected:
            raise ModelSpecError(
                "prior %r: family %s takes %d hyperparameter(s)"
                % (self.param, self.family, expected)
            )
        if self.role not in ("coef", "group_sd", "noise"):
            raise ModelSpecError("prior %r: unknown role %r" % (self.param, self.role))


@dataclass(frozen=True)
class TargetSpec:
    """One target quantity: what to compute from likelihood draws and how
    the expert is queried about it (the elicitation technique)."""

    id: str
    kind: str
    technique: ElicitationTechnique
    rows: tuple = None    # group_mean, r2: design row indices
    rows_b: tuple = None  # diff_group_means: subtrahend rows
    row: int = None       # design_point: single design row
    param: str = None     # parameter: model parameter name

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ModelSpecError("target %r: unknown kind %r" % (self.id, self.kind))


@dataclass(frozen=True)
class Hierarchy:
    """Varying intercept + slope structure: each design row belongs to one
    group; the slope column's coefficient varies by group."""

    group_index: tuple
    slope_column: int
    n_groups: int = 0

    def __post_init__(self):
        idx = np.asarray(self.group_index, dtype=np.intp)
        object.__setattr__(self, "group_index", tuple(int(i) for i in idx))
        if self.n_groups == 0:
            object.__setattr__(self, "n_groups", int(idx.max()) + 1)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    columns: tuple
    design: np.ndarray
    priors: tuple
    likelihood: str
    link: str
    targets: tuple
    lambda_star: dict = None
    init_ranges: dict = None
    trials: int = None       # binomial
    truncation: int = None   # poisson upper bound t_u
    hierarchy: Hierarchy = None
    notes: str = ""

    def __post_init__(self):
        design = np.asarray(self.design, dtype=np.float64)
        if design.ndim != 2:
            raise ModelSpecError("design must be a 2-D matrix")
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "priors", tuple(self.priors))
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.likelihood not in LIKELIHOODS:
            raise ModelSpecError("unknown likelihood %r" % (self.likelihood,))
        if self.link not in LINKS:
            raise ModelSpecError("unknown link %r" % (self.link,))
        if design.shape[1] != len(self.columns):
            raise ModelSpecError("design has %d columns but %d names" % (design.shape[1], len(self.columns)))
        n_coef = sum(1 for p in self.priors if p.role == "coef")
        if n_coef != design.shape[1]:
            raise ModelSpecError(
                "%d design columns need %d coefficient priors, got %d"
                % (design.shape[1], design.shape[1], n_coef)
            )
        seen = {}
        for p in self.priors:
            for h in p.hyper:
                if h in seen:
                    raise ModelSpecError(
                        "hyperparameter %r referenced by both %r and %r" % (h, seen[h], p.param)
                    )
                seen[h] = p.param
        if self.lambda_star is not None and set(self.lambda_star) != set(seen):
            raise ModelSpecError("lambda_star keys do not match the hyperparameter slots")
        if self.hierarchy is not None:
            if len(self.hierarchy.group_index) != design.shape[0]:
                raise ModelSpecError("hierarchy group_index length must equal design rows")
            if not (0 <= self.hierarchy.slope_column < design.shape[1]):
                raise ModelSpecError("hierarchy slope_column out of range")
        ids = [t.id for t in self.targets]
        if len(set(ids)) != len(ids):
            raise ModelSpecError("duplicate target ids")
        params = {p.param for p in self.priors}
        if self.likelihood == "weibull":
            # outcome-scale dispersion is derivable from the shape draw
            params.add("s")
        n_rows = design.shape[0]
        for t in self.targets:
            for rows in (t.rows, t.rows_b):
                if rows is not None:
                    r = np.asarray(rows, dtype=np.intp)
                    if r.size == 0 or np.any(r < 0) or np.any(r >= n_rows):
                        raise ModelSpecError("target %r references invalid design rows" % (t.id,))
            if t.kind == "design_point" and not (0 <= int(t.row) < n_rows):
                raise ModelSpecError("target %r: design row %r out of range" % (t.id, t.row))
            if t.kind == "parameter" and t.param not in params:
                raise ModelSpecError("target %r: unknown parameter %r" % (t.id, t.param))
            if t.kind == "diff_group_means" and (t.rows is None or t.rows_b is None):
                raise ModelSpecError("target %r: difference needs both row groups" % (t.id,))
            if t.kind in ("group_mean", "r2") and t.rows is None:
                raise ModelSpecError("target %r: needs design rows" % (t.id,))

    @property
    def hyper_names(self):
        names = []
        for p in self.priors:
            names.extend(p.hyper)
        return names

    @property
    def scale_hypers(self):
        """Hyperparameter slots constrained to be positive."""
        out = set()
        for p in self.priors:
            if p.family == "normal":
                out.add(p.hyper[1])
            else:
                out.add(p.hyper[0])
        return out

    def target_ids(self):
        return [t.id for t in self.targets]

    def active_rows(self):
        """Design rows that likelihood draws are evaluated at.

        Hierarchical models restrict simulation to the rows the targets
        actually reference; everything else uses the full design.
        """
        if self.hierarchy is None:
            return np.arange(self.design.shape[0], dtype=np.intp)
        used = set()
        for t in self.targets:
            for rows in (t.rows, t.rows_b):
                if rows is not None:
                    used.update(int(r) for r in rows)
            if t.row is not None:
                used.add(int(t.row))
        if not used:
            return np.arange(self.design.shape[0], dtype=np.intp)
        return np.asarray(sorted(used), dtype=np.intp)


# -------------------------------------------------- constrained parameters

def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(over="ignore"):
        out = np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))
    return out if out.ndim else float(out)


def constrain(model, raw):
    """Map unconstrained coordinates to the hyperparameter domain.

    Locations pass through; scale/rate slots go through softplus. Accepts a
    dict of floats or Nodes keyed by hyperparameter name.
    """
    scales = model.scale_hypers
    out = {}
    for name in model.hyper_names:
        v = raw[name]
        if name in scales:
            out[name] = autodiff.softplus(v) if isinstance(v, Node) else float(np.logaddexp(0.0, v))
        else:
            out[name] = v
    return out


def unconstrain(model, lam):
    """Inverse of constrain() on plain floats."""
    scales = model.scale_hypers
    return {
        name: softplus_inverse(lam[name]) if name in scales else float(lam[name])
        for name in model.hyper_names
    }


# ------------------------------------------------------------ shared pieces

class NoiseSource:
    """Names every noise draw by (seed, phase, batch element, purpose).

    Draws are pure functions of that address, so any chunking or thread
    schedule reproduces the same values, and the expert phase can never
    collide with training epochs.
    """

    def __init__(self, seed, phase):
        self.seed = int(seed)
        self.phase = tuple(phase)

    def normal(self, b, purpose, shape):
        return samplers.normal_noise(self.seed, self.phase + (int(b),) + purpose, shape)

    def uniform(self, b, purpose, shape):
        return samplers.uniform_noise(self.seed, self.phase + (int(b),) + purpose, shape)

    def stream(self, b, purpose):
        return self.phase + (int(b),) + purpose


def compute_r2(theta, y):
    """Proportion of predictive variance explained by the modeled means.

    Sample variance (divisor n-1) over the trailing axis of the modeled
    means divided by the variance of the predictive draws; the denominator
    is guarded with a small epsilon.
    """
    if isinstance(theta, Node) or isinstance(y, Node):
        return autodiff.variance(theta, axis=-1) / (autodiff.variance(y, axis=-1) + R2_EPS)
    theta = np.asarray(theta, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return theta.var(axis=-1, ddof=1) / (y.var(axis=-1, ddof=1) + R2_EPS)


def group_means(y, groups):
    """Mean of y over the observation (trailing) axis within each group.

    groups: sequence of index arrays into the trailing axis. Returns values
    stacked along a new trailing axis, one entry per group.
    """
    parts = []
    for i, g in enumerate(groups):
        idx = np.asarray(g, dtype=np.intp)
        if idx.size == 0:
            raise ModelSpecError("group %d is empty" % i)
        if isinstance(y, Node):
            parts.append(autodiff.reduce_mean(autodiff.take(y, idx, axis=y.values.ndim - 1), axis=-1))
        else:
            parts.append(np.asarray(y, dtype=np.float64)[..., idx].mean(axis=-1))
    if isinstance(y, Node):
        return autodiff.stack(parts, axis=-1)
    return np.stack(parts, axis=-1)


def _mean_at(node, positions):
    idx = np.asarray(positions, dtype=np.intp)
    if idx.size == 1:
        got = autodiff.take(node, idx, axis=node.values.ndim - 1)
        return autodiff.reshape(got, node.values.shape[:-1])
    return autodiff.reduce_mean(autodiff.take(node, idx, axis=node.values.ndim - 1), axis=-1)


def _expand(node, ndim_extra=1):
    return autodiff.reshape(node, node.values.shape + (1,) * ndim_extra)


def _draw_priors(model, lam, source, s, batch):
    """Per-parameter draws of shape (len(batch), s), keyed by parameter name."""
    draws = {}
    coef_names = []
    for p in model.priors:
        if p.family == "normal":
            k = len(coef_names)
            eps = np.stack([source.normal(b, ("coef", k), (s,)) for b in batch])
            draws[p.param] = samplers.sample_normal(lam[p.hyper[0]], lam[p.hyper[1]], eps)
            coef_names.append(p.param)
        elif p.family == "halfnormal":
            u = np.stack([source.uniform(b, ("sd", p.param), (s,)) for b in batch])
            draws[p.param] = samplers.sample_halfnormal(lam[p.hyper[0]], u)
        else:
            u = np.stack([source.uniform(b, ("noise", p.param), (s, p.n_terms)) for b in batch])
            draws[p.param] = samplers.sample_exponential_mean(lam[p.hyper[0]], p.n_terms, u)
    return draws, coef_names


def _linear_predictor(model, draws, coef_names, design_rows):
    coefs = autodiff.stack([draws[name] for name in coef_names], axis=-1)
    return autodiff.design_matmul(coefs, design_rows)


def _apply_link(model, lin):
    if model.link == "identity":
        return lin
    if model.link == "logit":
        return autodiff.sigmoid(lin)
    return autodiff.exp(lin)


def _weibull_spread_factor(alpha):
    """sd/mean ratio of a Weibull with shape alpha, sqrt(G(1+2/a)/G(1+1/a)^2 - 1)."""
    log_ratio = autodiff.lgamma(1.0 + 2.0 / alpha) - 2.0 * autodiff.lgamma(1.0 + 1.0 / alpha)
    return autodiff.sqrt(autodiff.exp(log_ratio) - 1.0)


# ------------------------------------------------------------ forward routes

def forward(model, lam, source, s, batch=(0,), force_generic=False, gumbel_tau=1.0):
    """Simulate every target quantity.

    lam: constrained hyperparameters, Nodes or floats, keyed by name.
    source: NoiseSource; batch: global batch-element indices (leading axis).
    Returns {target id: Node of shape (len(batch), s)} in target order.
    """
    if not force_generic and model.likelihood == "normal":
        if model.hierarchy is None:
            return _forward_normal_collapsed(model, lam, source, s, batch)
        return _forward_hier_normal_collapsed(model, lam, source, s, batch)
    return _forward_generic(model, lam, source, s, batch, gumbel_tau)


def _forward_generic(model, lam, source, s, batch, gumbel_tau):
    active = model.active_rows()
    pos = {int(r): i for i, r in enumerate(active)}
    draws, coef_names = _draw_priors(model, lam, source, s, batch)
    lin = _linear_predictor(model, draws, coef_names, model.design[active])

    if model.hierarchy is not None:
        h = model.hierarchy
        eps1 = np.stack([source.normal(b, ("re", 1), (s, h.n_groups)) for b in batch])
        eps2 = np.stack([source.normal(b, ("re", 2), (s, h.n_groups)) for b in batch])
        rho = samplers.sample_lkj2(np.stack([source.uniform(b, ("rho",), (s,)) for b in batch]))
        sd_names = [p.param for p in model.priors if p.role == "group_sd"]
        u0, u1 = samplers.sample_mvnormal2(
            _expand(draws[sd_names[0]]), _expand(draws[sd_names[1]]), rho[..., None], eps1, eps2
        )
        gidx = np.asarray(h.group_index, dtype=np.intp)[active]
        slope_vals = model.design[active, h.slope_column]
        last = lin.values.ndim - 1
        lin = lin + autodiff.take(u0, gidx, axis=last) + autodiff.take(u1, gidx, axis=last) * slope_vals

    theta = _apply_link(model, lin)
    noise_names = [p.param for p in model.priors if p.role == "noise"]

    if model.likelihood == "normal":
        eps_y = np.stack([source.normal(b, ("lik",), (s, active.size)) for b in batch])
        y = theta + _expand(draws[noise_names[0]]) * eps_y
    elif model.likelihood == "weibull":
        alpha = draws[noise_names[0]]
        u_y = np.stack([source.uniform(b, ("lik",), (s, active.size)) for b in batch])
        scale = theta / autodiff.exp(_expand(autodiff.lgamma(1.0 + 1.0 / alpha)))
        y = samplers.sample_weibull(_expand(alpha), scale, u_y)
    else:
        streams = [source.stream(b, ("lik",)) for b in batch]
        if model.likelihood == "binomial":
            y = samplers.relaxed_count(
                theta, "binomial", gumbel_tau, source.seed, streams, trials=model.trials
            )
        else:
            y = samplers.relaxed_count(
                theta, "poisson", gumbel_tau, source.seed, streams, t_upper=model.truncation
            )

    out = {}
    for t in model.targets:
        if t.kind == "group_mean":
            out[t.id] = _mean_at(y, [pos[int(r)] for r in t.rows])
        elif t.kind == "diff_group_means":
            out[t.id] = _mean_at(y, [pos[int(r)] for r in t.rows]) - _mean_at(
                y, [pos[int(r)] for r in t.rows_b]
            )
        elif t.kind == "grand_mean":
            out[t.id] = autodiff.reduce_mean(y, axis=-1)
        elif t.kind == "design_point":
            out[t.id] = _mean_at(y, [pos[int(t.row)]])
        elif t.kind == "r2":
            idx = np.asarray([pos[int(r)] for r in t.rows], dtype=np.intp)
            last = y.values.ndim - 1
            out[t.id] = compute_r2(
                autodiff.take(theta, idx, axis=last), autodiff.take(y, idx, axis=last)
            )
        else:
            if model.likelihood == "weibull" and t.param not in draws:
                # dispersion on the outcome scale: mean cell sd over the
                # simulated rows, theta * spread(alpha)
                alpha = draws[noise_names[0]]
                out[t.id] = autodiff.reduce_mean(theta, axis=-1) * _weibull_spread_factor(alpha)
            else:
                out[t.id] = draws[t.param]
    return out


def _forward_normal_collapsed(model, lam, source, s, batch):
    """Normal likelihood without hierarchy, observation axis collapsed.

    The linear predictor only takes one value per distinct design row, and
    the noise enters every statistic through per-replicate aggregates (group
    means of eps, centered cross sums), so the graph holds (batch, S) arrays
    only. Values equal the generic route exactly.
    """
    nb = len(batch)
    n_rows = model.design.shape[0]
    cells, inverse, counts = np.unique(
        model.design, axis=0, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    n_cells = cells.shape[0]

    draws, coef_names = _draw_priors(model, lam, source, s, batch)
    theta_c = _linear_predictor(model, draws, coef_names, cells)  # (nb, s, C)
    s_node = draws[[p.param for p in model.priors if p.role == "noise"][0]]
    eps_y = np.stack([source.normal(b, ("lik",), (s, n_rows)) for b in batch])

    def weighted_cell_mean(rows):
        idx = np.asarray(rows, dtype=np.intp)
        w = np.bincount(inverse[idx], minlength=n_cells) / idx.size
        e = eps_y[..., idx].mean(axis=-1)
        return autodiff.reduce_sum(theta_c * w, axis=-1) + s_node * e

    out = {}
    for t in model.targets:
        if t.kind == "group_mean":
            out[t.id] = weighted_cell_mean(t.rows)
        elif t.kind == "diff_group_means":
            out[t.id] = weighted_cell_mean(t.rows) - weighted_cell_mean(t.rows_b)
        elif t.kind == "grand_mean":
            out[t.id] = weighted_cell_mean(np.arange(n_rows))
        elif t.kind == "design_point":
            cell = inverse[int(t.row)]
            got = autodiff.take(theta_c, np.asarray([cell]), axis=2)
            out[t.id] = autodiff.reshape(got, (nb, s)) + s_node * eps_y[..., int(t.row)]
        elif t.kind == "r2":
            idx = np.asarray(t.rows, dtype=np.intp)
            n = idx.size
            cell_counts = np.bincount(inverse[idx], minlength=n_cells).astype(np.float64)
            eps_sel = eps_y[..., idx]
            ebar = eps_sel.mean(axis=-1)
            centered = eps_sel - ebar[..., None]
            # per-cell sums of centered noise and the total square sum are
            # plain constants; theta variance stays exact through the cell
            # decomposition sum_c n_c (theta_c - mean)^2
            cross_const = np.empty((nb, s, n_cells))
            for c in range(n_cells):
                mask = inverse[idx] == c
                cross_const[..., c] = centered[..., mask].sum(axis=-1) if mask.any() else 0.0
            q_const = (centered * centered).sum(axis=-1)
            theta_bar = autodiff.reduce_sum(theta_c * (cell_counts / n), axis=-1, keepdims=True)
            dev = theta_c - theta_bar
            var_theta = autodiff.reduce_sum(dev * dev * cell_counts, axis=-1) / (n - 1)
            cross = autodiff.reduce_sum(dev * cross_const, axis=-1)
            var_y = var_theta + (2.0 * s_node * cross + s_node * s_node * q_const) / (n - 1)
            out[t.id] = var_theta / (var_y + R2_EPS)
        else:
            out[t.id] = draws[t.param]
    return out


def _forward_hier_normal_collapsed(model, lam, source, s, batch):
    """Hierarchical normal likelihood with the group axis collapsed.

    Every target reduces to an affine or quadratic form in (tau0, tau1, s)
    whose coefficients are per-replicate noise moments: a varying-effect
    contribution at design value x is (tau0 + x rho tau1) eps1 +
    x tau1 sqrt(1-rho^2) eps2, so variances over groups are quadratic forms
    in the constant noise (co)variances. Values equal the generic route
    exactly.
    """
    h = model.hierarchy
    active = model.active_rows()
    pos = {int(r): i for i, r in enumerate(active)}
    draws, coef_names = _draw_priors(model, lam, source, s, batch)
    eps1 = np.stack([source.normal(b, ("re", 1), (s, h.n_groups)) for b in batch])
    eps2 = np.stack([source.normal(b, ("re", 2), (s, h.n_groups)) for b in batch])
    rho = samplers.sample_lkj2(np.stack([source.uniform(b, ("rho",), (s,)) for b in batch]))
    eps_y = np.stack([source.normal(b, ("lik",), (s, active.size)) for b in batch])

    sd_names = [p.param for p in model.priors if p.role == "group_sd"]
    tau0, tau1 = draws[sd_names[0]], draws[sd_names[1]]
    s_node = draws[[p.param for p in model.priors if p.role == "noise"][0]]
    q = np.sqrt(1.0 - rho * rho)
    slope_col = h.slope_column
    inter_cols = [c for c in range(model.design.shape[1]) if c != slope_col]
    beta_slope = draws[coef_names[slope_col]]
    gidx = np.asarray(h.group_index, dtype=np.intp)

    def cov(a, b):
        n = a.shape[-1]
        am = a - a.mean(axis=-1, keepdims=True)
        bm = b - b.mean(axis=-1, keepdims=True)
        return (am * bm).sum(axis=-1) / (n - 1)

    def fixed_part(row):
        x = model.design[row]
        total = None
        for c in range(model.design.shape[1]):
            term = draws[coef_names[c]] * float(x[c])
            total = term if total is None else total + term
        return total

    out = {}
    for t in model.targets:
        if t.kind == "design_point":
            row = int(t.row)
            x = float(model.design[row, slope_col])
            g = gidx[row]
            e1g, e2g = eps1[..., g], eps2[..., g]
            varying = tau0 * e1g + tau1 * (rho * e1g + q * e2g) * x
            out[t.id] = fixed_part(row) + varying + s_node * eps_y[..., pos[row]]
        elif t.kind == "group_mean":
            rows = np.asarray(t.rows, dtype=np.intp)
            x = model.design[rows, slope_col]
            if np.ptp(x) > 1e-12:
                raise ModelSpecError(
                    "target %r: collapsed route needs a common design value per group" % (t.id,)
                )
            xd = float(x[0])
            # averaging over groups commutes with the affine effect structure,
            # so only noise means survive
            e1 = eps1[..., gidx[rows]].mean(axis=-1)
            e2 = eps2[..., gidx[rows]].mean(axis=-1)
            ey = eps_y[..., [pos[int(r)] for r in rows]].mean(axis=-1)
            varying = tau0 * e1 + tau1 * (rho * e1 + q * e2) * xd
            out[t.id] = fixed_part(int(rows[0])) + varying + s_node * ey
        elif t.kind == "r2":
            rows = np.asarray(t.rows, dtype=np.intp)
            x = model.design[rows, slope_col]
            if np.ptp(x) > 1e-12:
                raise ModelSpecError(
                    "target %r: collapsed route needs a common design value per group" % (t.id,)
                )
            xd = float(x[0])
            grp = gidx[rows]
            e1, e2 = eps1[..., grp], eps2[..., grp]
            ey = eps_y[..., [pos[int(r)] for r in rows]]
            v11, v22, v33 = cov(e1, e1), cov(e2, e2), cov(ey, ey)
            v12, v13, v23 = cov(e1, e2), cov(e1, ey), cov(e2, ey)
            a = tau0 + tau1 * (xd * rho)
            c = tau1 * (xd * q)
            var_theta = a * a * v11 + 2.0 * (a * c) * v12 + c * c * v22
            var_y = (
                var_theta
                + s_node * s_node * v33
                + 2.0 * (a * s_node) * v13
                + 2.0 * (c * s_node) * v23
            )
            out[t.id] = var_theta / (var_y + R2_EPS)
        elif t.kind == "parameter":
            out[t.id] = draws[t.param]
        else:
            raise ModelSpecError(
                "target %r: kind %s not supported on the collapsed hierarchical route"
                % (t.id, t.kind)
            )
    return out


def forward_values(model, lam, seed, phase, s, batch=(0,), force_generic=False, gumbel_tau=1.0):
    """forward() at plain float hyperparameters; returns value arrays."""
    tape = autodiff.Tape()
    lam_nodes = {name: tape.constant(lam[name]) for name in model.hyper_names}
    if isinstance(phase, str):
        phase = (phase,)
    source = NoiseSource(seed, phase)
    draws = forward(
        model, lam_nodes, source, int(s), batch=batch,
        force_generic=force_generic, gumbel_tau=gumbel_tau,
    )
    return {tid: node.values for tid, node in draws.items()}


# ------------------------------------------------------------- JSON exchange

def dump_model(model):
    doc = {
        "name": model.name,
        "columns": list(model.columns),
        "design": [[float(v) for v in row] for row in model.design],
        "likelihood": model.likelihood,
        "link": model.link,
        "trials": model.trials,
        "truncation": model.truncation,
        "hierarchy": None,
        "priors": [
            {
                "param": p.param,
                "family": p.family,
                "hyper": list(p.hyper),
                "role": p.role,
                "n_terms": p.n_terms,
            }
            for p in model.priors
        ],
        "targets": [],
        "lambda_star": dict(model.lambda_star) if model.lambda_star else None,
        "init_ranges": {k: list(v) for k, v in model.init_ranges.items()}
        if model.init_ranges
        else None,
        "notes": model.notes,
    }
    if model.hierarchy is not None:
        doc["hierarchy"] = {
            "group_index": list(model.hierarchy.group_index),
            "slope_column": model.hierarchy.slope_column,
        }
    for t in model.targets:
        entry = {"id": t.id, "kind": t.kind, "technique": {"tag": t.technique.tag}}
        if t.technique.tag == "quantiles":
            entry["technique"]["probs"] = list(t.technique.probs)
        if t.technique.tag == "histogram":
            entry["technique"]["cap"] = t.technique.cap
        if t.rows is not None:
            entry["rows"] = [int(r) for r in t.rows]
        if t.rows_b is not None:
            entry["rows_b"] = [int(r) for r in t.rows_b]
        if t.row is not None:
            entry["row"] = int(t.row)
        if t.param is not None:
            entry["param"] = t.param
        doc["targets"].append(entry)
    return doc


def _technique_from_doc(doc):
    tag = doc["tag"]
    if tag == "quantiles":
        return ElicitationTechnique("quantiles", probs=tuple(doc.get("probs", (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9))))
    if tag == "histogram":
        return ElicitationTechnique("histogram", cap=int(doc.get("cap", 2000)))
    return ElicitationTechnique(tag)


def load_model(doc):
    try:
        hierarchy = None
        if doc.get("hierarchy"):
            hierarchy = Hierarchy(
                tuple(doc["hierarchy"]["group_index"]), int(doc["hierarchy"]["slope_column"])
            )
        priors = tuple(
            PriorSpec(
                p["param"], p["family"], tuple(p["hyper"]),
                role=p.get("role", "coef"), n_terms=int(p.get("n_terms", 1)),
            )
            for p in doc["priors"]
        )
        targets = tuple(
            TargetSpec(
                t["id"], t["kind"], _technique_from_doc(t["technique"]),
                rows=tuple(t["rows"]) if "rows" in t else None,
                rows_b=tuple(t["rows_b"]) if "rows_b" in t else None,
                row=t.get("row"), param=t.get("param"),
            )
            for t in doc["targets"]
        )
        init_ranges = None
        if doc.get("init_ranges"):
            init_ranges = {k: tuple(v) for k, v in doc["init_ranges"].items()}
        return ModelSpec(
            name=doc["name"],
            columns=tuple(doc["columns"]),
            design=np.asarray(doc["design"], dtype=np.float64),
            priors=priors,
            likelihood=doc["likelihood"],
            link=doc["link"],
            targets=targets,
            lambda_star=dict(doc["lambda_star"]) if doc.get("lambda_star") else None,
            init_ranges=init_ranges,
            trials=doc.get("trials"),
            truncation=doc.get("truncation"),
            hierarchy=hierarchy,
            notes=doc.get("notes", ""),
        )
    except (KeyError, TypeError) as e:
        raise ModelSpecError("model document is missing or mistypes field %s" % (e,)) from e


def write_model_file(path, model):
    with open(path, "w") as fh:
        json.dump(dump_model(model), fh, indent=1)
        fh.write("\n")


def read_model_file(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ModelSpecError("%s: not valid JSON (%s)" % (path, e)) from e
    return load_model(doc)


# ------------------------------------------------------------------ fixtures

QUANTILES = ElicitationTechnique("quantiles")
MOMENTS = ElicitationTechnique("moments")
HISTOGRAM = ElicitationTechnique("histogram", cap=512)


def _case1_normal():
    """Truth-judgment experiment: 2 (repetition) x 3 (encoding depth)
    between-subject factorial, 50 observations per cell, treatment contrasts
    with new/shallow as baselines. Responses are proportions of "true"
    judgments modeled with a normal likelihood."""
    n_per_cell = 50
    columns = ("intercept", "repeated", "standard", "deep", "repeated_standard", "repeated_deep")
    rows = []
    cell_rows = {}
    r = 0
    for rep in (0, 1):
        for enc in (0, 1, 2):
            std, deep = float(enc == 1), float(enc == 2)
            row = [1.0, float(rep), std, deep, rep * std, rep * deep]
            rows.extend([row] * n_per_cell)
            cell_rows[(rep, enc)] = tuple(range(r, r + n_per_cell))
            r += n_per_cell
    design = np.asarray(rows)

    def cells(**sel):
        out = []
        for (rep, enc), rr in sorted(cell_rows.items()):
            if sel.get("rep") is not None and rep != sel["rep"]:
                continue
            if sel.get("enc") is not None and enc != sel["enc"]:
                continue
            out.extend(rr)
        return tuple(out)

    priors = tuple(
        PriorSpec("beta%d" % k, "normal", ("mu%d" % k, "sigma%d" % k)) for k in range(6)
    ) + (PriorSpec("s", "exponential_mean", ("nu",), role="noise", n_terms=design.shape[0]),)
    targets = (
        TargetSpec("enc_shallow", "group_mean", QUANTILES, rows=cells(enc=0)),
        TargetSpec("enc_standard", "group_mean", QUANTILES, rows=cells(enc=1)),
        TargetSpec("enc_deep", "group_mean", QUANTILES, rows=cells(enc=2)),
        TargetSpec("rep_new", "group_mean", QUANTILES, rows=cells(rep=0)),
        TargetSpec("rep_repeated", "group_mean", QUANTILES, rows=cells(rep=1)),
        TargetSpec("diff_shallow", "diff_group_means", QUANTILES,
                   rows=cells(rep=1, enc=0), rows_b=cells(rep=0, enc=0)),
        TargetSpec("diff_standard", "diff_group_means", QUANTILES,
                   rows=cells(rep=1, enc=1), rows_b=cells(rep=0, enc=1)),
        TargetSpec("diff_deep", "diff_group_means", QUANTILES,
                   rows=cells(rep=1, enc=2), rows_b=cells(rep=0, enc=2)),
        TargetSpec("r2", "r2", HISTOGRAM, rows=tuple(range(design.shape[0]))),
        TargetSpec("grand_mean", "grand_mean", HISTOGRAM),
    )
    lambda_star = {
        "mu0": 0.12, "sigma0": 0.02, "mu1": 0.15, "sigma1": 0.02,
        "mu2": -0.02, "sigma2": 0.06, "mu3": -0.03, "sigma3": 0.06,
        "mu4": -0.02, "sigma4": 0.03, "mu5": -0.04, "sigma5": 0.03,
        "nu": 9.00,
    }
    return ModelSpec(
        name="case1_normal", columns=columns, design=design, priors=priors,
        likelihood="normal", link="identity", targets=targets, lambda_star=lambda_star,
        notes="balanced factorial; marginal means average cells with equal weights",
    )


def _case2_binomial():
    """Five-year survival counts after surgery, out of T=100 patients per
    design point, as a function of detected axillary nodes. The predictor is
    divided by its standard deviation."""
    nodes = np.asarray([0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0])
    scaled = nodes / nodes.std(ddof=1)
    design = np.stack([np.ones_like(scaled), scaled], axis=1)
    priors = (
        PriorSpec("beta0", "normal", ("mu0", "sigma0")),
        PriorSpec("beta1", "normal", ("mu1", "sigma1")),
    )
    targets = tuple(
        TargetSpec("deaths_x%d" % int(x), "design_point", QUANTILES, row=i)
        for i, x in enumerate(nodes)
    )
    lambda_star = {"mu0": -0.51, "sigma0": 0.06, "mu1": 0.26, "sigma1": 0.04}
    return ModelSpec(
        name="case2_binomial", columns=("intercept", "nodes_scaled"), design=design,
        priors=priors, likelihood="binomial", link="logit", targets=targets,
        lambda_star=lambda_star, trials=100,
        notes="predictor scaled by its sample standard deviation (divisor n-1)",
    )


def _case3_poisson():
    """Anti-discrimination law counts across 49 states: a log-linear model
    with the percentage of urban residents (z-transformed) and a three-level
    voting-trend factor, consistent-Democrat states as the reference."""
    n_states = 49
    urban = np.linspace(38.7, 94.7, n_states)
    urban_z = (urban - urban.mean()) / urban.std(ddof=1)
    party = [("dem", "rep", "swing")[i % 3] for i in range(n_states)]
    # reassign two states so the histogram targets cover all three groups
    party[16] = "swing"
    party[43] = "swing"
    design = np.stack(
        [
            np.ones(n_states),
            urban_z,
            np.asarray([p == "rep" for p in party], dtype=np.float64),
            np.asarray([p == "swing" for p in party], dtype=np.float64),
        ],
        axis=1,
    )
    group = lambda name: tuple(i for i, p in enumerate(party) if p == name)
    priors = (
        PriorSpec("beta0", "normal", ("mu0", "sigma0")),
        PriorSpec("beta1", "normal", ("mu1", "sigma1")),
        PriorSpec("beta2", "normal", ("mu2", "sigma2")),
        PriorSpec("beta3", "normal", ("mu3", "sigma3")),
    )
    targets = (
        TargetSpec("group_democrats", "group_mean", QUANTILES, rows=group("dem")),
        TargetSpec("group_republicans", "group_mean", QUANTILES, rows=group("rep")),
        TargetSpec("group_swing", "group_mean", QUANTILES, rows=group("swing")),
    ) + tuple(
        TargetSpec("state_%d" % state, "design_point", HISTOGRAM, row=state - 1)
        for state in (1, 11, 17, 22, 35, 44)
    )
    lambda_star = {
        "mu0": 2.91, "sigma0": 0.07, "mu1": 0.23, "sigma1": 0.05,
        "mu2": -1.51, "sigma2": 0.135, "mu3": -0.61, "sigma3": 0.105,
    }
    return ModelSpec(
        name="case3_poisson", columns=("intercept", "urban_z", "republican", "swing"),
        design=design, priors=priors, likelihood="poisson", link="log",
        targets=targets, lambda_star=lambda_star, truncation=110,
        notes="counts truncated at twice the expected per-state maximum",
    )


def _case4_design():
    n_persons, n_days = 100, 10
    days = np.arange(n_days, dtype=np.float64)
    scaled = days / days.std(ddof=1)
    design = np.zeros((n_persons * n_days, 2))
    design[:, 0] = 1.0
    design[:, 1] = np.tile(scaled, n_persons)
    group_index = np.repeat(np.arange(n_persons), n_days)
    return design, group_index, n_days


def _case4_targets():
    design, group_index, n_days = _case4_design()

    def day_rows(day):
        return tuple(range(day, design.shape[0], n_days))

    targets = tuple(
        TargetSpec("rt_day%d" % d, "group_mean", QUANTILES, rows=day_rows(d))
        for d in (0, 2, 4, 6, 8, 9)
    ) + (
        TargetSpec("r2_day0", "r2", HISTOGRAM, rows=day_rows(0)),
        TargetSpec("r2_day9", "r2", HISTOGRAM, rows=day_rows(9)),
        TargetSpec("s_moments", "parameter", MOMENTS, param="s"),
    )
    return design, group_index, targets


def _case4_normal():
    """Sleep-deprivation reaction times: 100 persons over days 0..9 with
    varying intercepts and slopes (day scaled by its standard deviation).
    Quantile targets track the average reaction time across persons per day;
    variance-explained targets compare all persons at the first and last day."""
    design, group_index, targets = _case4_targets()
    priors = (
        PriorSpec("beta0", "normal", ("mu0", "sigma0")),
        PriorSpec("beta1", "normal", ("mu1", "sigma1")),
        PriorSpec("tau0", "halfnormal", ("omega0",), role="group_sd"),
        PriorSpec("tau1", "halfnormal", ("omega1",), role="group_sd"),
        PriorSpec("s", "exponential_mean", ("nu",), role="noise", n_terms=design.shape[0]),
    )
    lambda_star = {
        "mu0": 250.40, "sigma0": 7.27, "mu1": 30.26, "sigma1": 4.82,
        "omega0": 33.00, "omega1": 23.00, "nu": 0.04,
    }
    init_ranges = {
        "mu0": (240.0, 260.0), "mu1": (20.0, 40.0),
        "sigma0": (5.0, 15.0), "sigma1": (2.0, 10.0),
        "omega0": (25.0, 45.0), "omega1": (12.0, 30.0),
        "nu": (0.01, 0.1),
    }
    return ModelSpec(
        name="case4_normal", columns=("intercept", "day_scaled"), design=design,
        priors=priors, likelihood="normal", link="identity", targets=targets,
        lambda_star=lambda_star, init_ranges=init_ranges,
        hierarchy=Hierarchy(tuple(group_index), slope_column=1),
        notes="correlation of varying effects is sampled uniform(-1,1), not learned",
    )


def _case4_weibull():
    """Same reaction-time design with a Weibull likelihood and log link; the
    noise dispersion target reports the row-average outcome-scale standard
    deviation implied by the Weibull shape."""
    design, group_index, targets = _case4_targets()
    priors = (
        PriorSpec("beta0", "normal", ("mu0", "sigma0")),
        PriorSpec("beta1", "normal", ("mu1", "sigma1")),
        PriorSpec("tau0", "halfnormal", ("omega0",), role="group_sd"),
        PriorSpec("tau1", "halfnormal", ("omega1",), role="group_sd"),
        PriorSpec("alpha", "exponential_mean", ("nu",), role="noise", n_terms=design.shape[0]),
    )
    lambda_star = {
        "mu0": 5.52, "sigma0": 0.03, "mu1": 0.10, "sigma1": 0.02,
        "omega0": 0.15, "omega1": 0.09, "nu": 0.069,
    }
    init_ranges = {"mu0": (4.5, 6.5), "mu1": (-0.5, 0.5)}
    return ModelSpec(
        name="case4_weibull", columns=("intercept", "day_scaled"), design=design,
        priors=priors, likelihood="weibull", link="log", targets=targets,
        lambda_star=lambda_star, init_ranges=init_ranges,
        hierarchy=Hierarchy(tuple(group_index), slope_column=1),
        notes="shares the reaction-time expert data; dispersion translated through the shape",
    )


def builtin_models():
    """The five bundled model programs, keyed by name."""
    fixtures = (_case1_normal(), _case2_binomial(), _case3_poisson(), _case4_normal(), _case4_weibull())
    return {m.name: m for m in fixtures}
