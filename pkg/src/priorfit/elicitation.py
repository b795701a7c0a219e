"""Elicitation techniques, the simulated expert, and the expert-file format.

A technique turns target-quantity draws into an elicited statistic: a small
matrix whose rows are replicates and whose columns are the statistic's
dimensions. Quantile and moment statistics from the expert are single rows;
histogram statistics are raw sample vectors (one column), subsampled to a
cap. The same techniques run in two modes: on plain arrays (expert side,
oracles) and on autodiff Nodes along the trailing axis (model side, inside
the training graph).
"""

from dataclasses import dataclass, field

import json
import numpy as np

from . import autodiff
from .autodiff import Node

DEFAULT_QUANTILE_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_HISTOGRAM_CAP = 2000

TECHNIQUE_TAGS = ("quantiles", "moments", "histogram")


class ElicitationError(ValueError):
    pass


class ExpertFileError(ValueError):
    """Schema violation in an expert-statistics file; names the offending field."""


@dataclass(frozen=True)
class ElicitationTechnique:
    tag: str
    probs: tuple = DEFAULT_QUANTILE_GRID
    cap: int = DEFAULT_HISTOGRAM_CAP

    def __post_init__(self):
        if self.tag not in TECHNIQUE_TAGS:
            raise ElicitationError("unknown technique tag %r" % (self.tag,))
        if self.tag == "quantiles":
            p = tuple(float(x) for x in self.probs)
            if not p or any(not (0.0 < x < 1.0) for x in p):
                raise ElicitationError("quantile probs must lie strictly inside (0,1)")
            if any(b <= a for a, b in zip(p, p[1:])):
                raise ElicitationError("quantile probs must be strictly increasing")
            object.__setattr__(self, "probs", p)
        if self.tag == "histogram" and int(self.cap) < 1:
            raise ElicitationError("histogram cap must be >= 1")

    @property
    def dim(self):
        if self.tag == "quantiles":
            return len(self.probs)
        if self.tag == "moments":
            return 2
        return 1


@dataclass
class ElicitedStatistic:
    id: str
    technique: ElicitationTechnique
    values: np.ndarray  # (rows, dim)
    source: str = "expert"

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        tech = self.technique
        if self.values.shape[1] != tech.dim:
            raise ElicitationError(
                "statistic %r: expected %d columns for %s, got %d"
                % (self.id, tech.dim, tech.tag, self.values.shape[1])
            )
        if self.source == "expert" and tech.tag in ("quantiles", "moments"):
            if self.values.shape[0] != 1:
                raise ElicitationError(
                    "statistic %r: expert %s statistics have exactly 1 row" % (self.id, tech.tag)
                )
        if tech.tag == "quantiles" and np.any(np.diff(self.values, axis=1) < -1e-9):
            raise ElicitationError("statistic %r: quantile rows must be non-decreasing" % (self.id,))
        if tech.tag == "moments" and np.any(self.values[:, 1] < 0):
            raise ElicitationError("statistic %r: sd must be >= 0" % (self.id,))


# ------------------------------------------------------------- techniques

def quantiles(samples, probs=DEFAULT_QUANTILE_GRID):
    """Linear-interpolation sample quantiles, position h = (n-1)p + 1.

    Array input: quantiles along the trailing axis via numpy (same rule).
    Node input: differentiable through the gathered order statistics; the
    sort permutation is frozen at forward time.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if isinstance(samples, Node):
        n = samples.shape[-1]
        if n < 2:
            raise ElicitationError("quantiles need at least 2 samples")
        h = (n - 1) * probs
        lo = np.floor(h).astype(np.intp)
        hi = np.minimum(lo + 1, n - 1)
        frac = h - lo
        srt = autodiff.sort_last(samples)
        return (1.0 - frac) * autodiff.take_last(srt, lo) + frac * autodiff.take_last(srt, hi)
    arr = np.asarray(samples, dtype=np.float64)
    if arr.shape[-1] < 2:
        raise ElicitationError("quantiles need at least 2 samples")
    return np.quantile(arr, probs, axis=-1, method="linear").T if arr.ndim > 1 else np.quantile(
        arr, probs, method="linear"
    )


def moments(samples):
    """(mean, sd) with sd divisor n-1, along the trailing axis."""
    if isinstance(samples, Node):
        if samples.shape[-1] < 2:
            raise ElicitationError("moments need at least 2 samples")
        m = autodiff.reduce_mean(samples, axis=-1)
        sd = autodiff.sqrt(autodiff.variance(samples, axis=-1))
        return autodiff.stack([m, sd], axis=-1)
    arr = np.asarray(samples, dtype=np.float64)
    if arr.shape[-1] < 2:
        raise ElicitationError("moments need at least 2 samples")
    return np.stack([arr.mean(axis=-1), arr.std(axis=-1, ddof=1)], axis=-1)


def stride_indices(n, cap):
    """Deterministic uniform-stride subsample indices: floor(j*n/cap)."""
    n, cap = int(n), int(cap)
    if n <= cap:
        return np.arange(n, dtype=np.intp)
    return (np.arange(cap, dtype=np.intp) * n) // cap


def histogram_stat(samples, cap=DEFAULT_HISTOGRAM_CAP):
    """Raw samples, stride-subsampled to at most cap entries (no binning)."""
    if isinstance(samples, Node):
        flat = autodiff.reshape(samples, (-1,))
        idx = stride_indices(flat.shape[0], cap)
        if idx.size == flat.shape[0]:
            return flat
        return autodiff.take_last(flat, idx)
    arr = np.asarray(samples, dtype=np.float64).reshape(-1)
    if arr.size < 1:
        raise ElicitationError("histogram_stat needs at least 1 sample")
    return arr[stride_indices(arr.size, cap)]


def apply_technique(technique, draws):
    """Model-side statistic node from target draws shaped (B, n_samples).

    quantiles -> (B, len(probs)); moments -> (B, 2); histogram -> the
    flattened raw draws (subsampling to the cap happens at loss assembly,
    over the full batch).
    """
    if technique.tag == "quantiles":
        return quantiles(draws, technique.probs)
    if technique.tag == "moments":
        return moments(draws)
    return autodiff.reshape(draws, (-1,)) if isinstance(draws, Node) else np.reshape(draws, -1)


def expert_statistic(stat_id, technique, draws_values):
    """Collapse one expert-side draw matrix (1, S_E) into an ElicitedStatistic."""
    row = np.asarray(draws_values, dtype=np.float64).reshape(-1)
    if technique.tag == "quantiles":
        vals = quantiles(row, technique.probs)[None, :]
    elif technique.tag == "moments":
        vals = moments(row)[None, :]
    else:
        vals = histogram_stat(row, technique.cap)[:, None]
    return ElicitedStatistic(stat_id, technique, vals, source="expert")


# ---------------------------------------------------------- simulated expert

def simulate_ideal_expert(model, lambda_star, s_e, seed):
    """Expert statistics from one forward run (B=1, S=s_e) at lambda_star.

    The expert shares the generative model; statistics are deterministic
    given the seed and independent of training-epoch streams (own phase tag).
    """
    from . import models as models_mod

    draws = models_mod.forward_values(model, lambda_star, seed=seed, phase="expert", s=int(s_e))
    stats = []
    for target in model.targets:
        stats.append(expert_statistic(target.id, target.technique, draws[target.id]))
    return stats


def perturb_expert(stats, scenario, ids=None):
    """Inconsistent-expert scenarios.

    double-s : multiply both moments of the elicited noise-scale statistic by 2
    halve-r2 : multiply every R2 histogram sample by 0.5
    Default id resolution: double-s targets every moments-technique statistic;
    halve-r2 targets histogram statistics whose id starts with "r2". The rest
    pass through untouched.
    """
    if scenario == "benchmark":
        return [ElicitedStatistic(s.id, s.technique, s.values.copy(), s.source) for s in stats]
    if scenario == "double-s":
        factor, default_ids = 2.0, [s.id for s in stats if s.technique.tag == "moments"]
    elif scenario == "halve-r2":
        factor, default_ids = 0.5, [
            s.id for s in stats if s.technique.tag == "histogram" and s.id.startswith("r2")
        ]
    else:
        raise ElicitationError("unknown scenario %r" % (scenario,))
    target_ids = list(ids) if ids is not None else default_ids
    if not target_ids:
        raise ElicitationError("scenario %r: no matching statistic ids" % (scenario,))
    known = {s.id for s in stats}
    missing = [i for i in target_ids if i not in known]
    if missing:
        raise ElicitationError("scenario %r: missing statistic ids %s" % (scenario, missing))
    out = []
    for s in stats:
        vals = s.values * factor if s.id in target_ids else s.values.copy()
        out.append(ElicitedStatistic(s.id, s.technique, vals, s.source))
    return out


# ------------------------------------------------------------------ file IO

def write_expert_file(path, stats, model_name, seed):
    doc = {"model": model_name, "seed": int(seed), "statistics": []}
    for s in stats:
        entry = {"id": s.id, "technique": s.technique.tag}
        if s.technique.tag == "quantiles":
            entry["probs"] = list(s.technique.probs)
        entry["values"] = [float(v) for v in s.values.reshape(-1)]
        doc["statistics"].append(entry)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)  # floats via repr: exact round-trip
        fh.write("\n")


def _fail(where, msg):
    raise ExpertFileError("%s: %s" % (where, msg))


def read_expert_file(path, histogram_cap=DEFAULT_HISTOGRAM_CAP):
    """Parse and validate an expert-statistics JSON file.

    Returns (model_name, seed, [ElicitedStatistic]). Histogram statistics get
    `histogram_cap` attached (the file does not carry caps).
    """
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ExpertFileError("%s: not valid JSON (%s)" % (path, e)) from e
    if not isinstance(doc, dict):
        _fail(path, "top level must be an object")
    for key in ("model", "seed", "statistics"):
        if key not in doc:
            _fail(path, "missing %r field" % key)
    if not isinstance(doc["statistics"], list):
        _fail(path, "'statistics' must be a list")
    stats = []
    for i, entry in enumerate(doc["statistics"]):
        where = "%s: statistics[%d]" % (path, i)
        if not isinstance(entry, dict):
            _fail(where, "must be an object")
        sid = entry.get("id")
        if not isinstance(sid, str) or not sid:
            _fail(where, "missing or empty 'id'")
        where = "%s (id=%s)" % (where, sid)
        tag = entry.get("technique")
        if tag is None:
            _fail(where, "missing 'technique' field")
        if tag not in TECHNIQUE_TAGS:
            _fail(where, "unknown technique %r" % (tag,))
        values = entry.get("values")
        if not isinstance(values, list) or not values:
            _fail(where, "missing or empty 'values'")
        try:
            arr = np.asarray([float(v) for v in values], dtype=np.float64)
        except (TypeError, ValueError):
            _fail(where, "'values' must be numbers")
        if tag == "quantiles":
            probs = entry.get("probs", list(DEFAULT_QUANTILE_GRID))
            tech = ElicitationTechnique("quantiles", probs=tuple(probs))
            if arr.size != tech.dim:
                _fail(where, "expected %d quantile values, got %d" % (tech.dim, arr.size))
            vals = arr[None, :]
        elif tag == "moments":
            tech = ElicitationTechnique("moments")
            if arr.size != 2:
                _fail(where, "moments need exactly [mean, sd]")
            vals = arr[None, :]
        else:
            tech = ElicitationTechnique("histogram", cap=histogram_cap)
            vals = arr[:, None]
        try:
            stats.append(ElicitedStatistic(sid, tech, vals, source="expert"))
        except ElicitationError as e:
            _fail(where, str(e))
    return doc["model"], int(doc["seed"]), stats
