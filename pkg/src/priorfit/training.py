"""Stochastic-gradient fitting of prior hyperparameters to expert statistics.

One epoch is one optimizer step: simulate a (B, S_M) batch of every target
quantity, summarize each with its elicitation technique, measure the kernel
discrepancy against the expert's statistic, weight the components, and push
one Adam update through the unconstrained hyperparameter coordinates.

The batch axis is processed in fixed-size chunks so peak memory stays flat:
each chunk's graph ends at its statistic nodes (phase A), a small joint
graph combines all chunks into the weighted loss (phase B), and chunk
adjoints flow back to the hyperparameters one chunk at a time (phase C).
Every noise draw is addressed by (seed, epoch, batch element, purpose), so
simulated values are identical for any chunk size or worker count, and the
gradient reduction runs in a fixed order over chunks, making traces
byte-identical for any worker count at a fixed chunk size (the chunk size
itself regroups floating-point sums in the last bits). Chunk graphs are
kept between phases when they fit a memory budget and recomputed from the
same noise streams otherwise; both paths produce the same numbers.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import time

from . import autodiff, elicitation, losses, models, samplers
from .autodiff import NonFiniteError

CHUNK = 32
KEEP_GRAPH_BUDGET_BYTES = 1.2e9
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
CLIP_NORM = 100.0


class ConfigError(ValueError):
    """Bad configuration or mismatched inputs, detected before epoch 0."""


class TrainingAbort(RuntimeError):
    """Non-finite value during an epoch; carries epoch and offending part."""

    def __init__(self, epoch, where, message):
        self.epoch = epoch
        self.where = where
        super().__init__("epoch %d: %s (%s)" % (epoch, message, where))


@dataclass
class TrainingConfig:
    epochs: int
    batch_size: int = 256
    expert_samples: int = 300
    model_samples: int = 200
    lr_initial: float = 0.1
    lr_min: float = 1e-5
    decay_rate: float = 0.97
    decay_step: int = 5
    dwa_temperature: float = losses.DWA_TEMPERATURE
    gumbel_tau: float = 1.0
    truncation: int = None
    seed: int = 2023
    normalize: bool = False
    init_ranges: dict = None      # constrained-space (lo, hi) per hyperparameter
    init_lambda: dict = None      # exact constrained start, overrides draws
    kernel: losses.KernelSpec = field(default_factory=losses.KernelSpec)
    jobs: int = 1
    chunk: int = CHUNK

    def __post_init__(self):
        for name in ("epochs", "batch_size", "expert_samples", "model_samples"):
            if int(getattr(self, name)) < 1:
                raise ConfigError("%s must be >= 1" % name)
        if not (0.0 < self.lr_min <= self.lr_initial):
            raise ConfigError("need 0 < lr_min <= lr_initial")
        if not (0.0 < self.decay_rate <= 1.0):
            raise ConfigError("decay_rate must lie in (0, 1]")
        if int(self.decay_step) < 1:
            raise ConfigError("decay_step must be >= 1")
        if int(self.jobs) < 1 or int(self.chunk) < 1:
            raise ConfigError("jobs and chunk must be >= 1")


def lr(step, cfg):
    """Exponentially decaying learning rate with a floor."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    return max(cfg.lr_min, cfg.lr_initial * cfg.decay_rate ** (step / cfg.decay_step))


class AdamState:
    """Bias-corrected Adam over a named set of scalar coordinates."""

    def __init__(self, names):
        self.names = list(names)
        self.m = {n: 0.0 for n in self.names}
        self.v = {n: 0.0 for n in self.names}
        self.t = 0

    def step(self, raw, grad, step_lr):
        for n in self.names:
            if not np.isfinite(grad[n]):
                raise ValueError("non-finite gradient for %s" % n)
        self.t += 1
        out = {}
        for n in self.names:
            g = float(grad[n])
            self.m[n] = ADAM_BETA1 * self.m[n] + (1.0 - ADAM_BETA1) * g
            self.v[n] = ADAM_BETA2 * self.v[n] + (1.0 - ADAM_BETA2) * g * g
            mhat = self.m[n] / (1.0 - ADAM_BETA1 ** self.t)
            vhat = self.v[n] / (1.0 - ADAM_BETA2 ** self.t)
            out[n] = float(raw[n]) - step_lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        return out


def adam_step(state, raw, grad, step_lr):
    return state.step(raw, grad, step_lr)


# ------------------------------------------------------------------- trace

class TrainingTrace:
    """Per-epoch diagnostics with a fixed CSV column layout.

    Columns: epoch, total_loss, loss_<id>..., weight_<id>..., lambda_<name>...,
    gradnorm_<name>..., lr, clipped, seconds. Floats are written with repr,
    which round-trips every value exactly.
    """

    def __init__(self, target_ids, hyper_names):
        self.target_ids = list(target_ids)
        self.hyper_names = list(hyper_names)
        self.columns = (
            ["epoch", "total_loss"]
            + ["loss_%s" % t for t in self.target_ids]
            + ["weight_%s" % t for t in self.target_ids]
            + ["lambda_%s" % n for n in self.hyper_names]
            + ["gradnorm_%s" % n for n in self.hyper_names]
            + ["lr", "clipped", "seconds"]
        )
        self.rows = []

    def append(self, row):
        missing = [c for c in self.columns if c not in row]
        if missing:
            raise ConfigError("trace row missing columns %s" % missing)
        self.rows.append({c: row[c] for c in self.columns})

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        if name not in self.columns:
            raise KeyError(name)
        return np.asarray([r[name] for r in self.rows], dtype=np.float64)

    def lambda_history(self):
        return {n: self.column("lambda_%s" % n) for n in self.hyper_names}

    def loss_history(self):
        """(epochs, components) matrix of unweighted component losses."""
        if not self.rows:
            return np.zeros((0, len(self.target_ids)))
        return np.stack([self.column("loss_%s" % t) for t in self.target_ids], axis=1)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.columns) + "\n")
            for r in self.rows:
                cells = []
                for c in self.columns:
                    v = r[c]
                    cells.append(str(int(v)) if c in ("epoch", "clipped") else repr(float(v)))
                fh.write(",".join(cells) + "\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if not lines:
            raise ConfigError("%s: empty trace file" % path)
        header = lines[0].split(",")
        target_ids = [c[len("loss_"):] for c in header if c.startswith("loss_")]
        hyper_names = [c[len("lambda_"):] for c in header if c.startswith("lambda_")]
        trace = cls(target_ids, hyper_names)
        if trace.columns != header:
            raise ConfigError("%s: unrecognized trace column layout" % path)
        for ln in lines[1:]:
            cells = ln.split(",")
            if len(cells) != len(header):
                raise ConfigError("%s: ragged trace row" % path)
            row = {}
            for c, cell in zip(header, cells):
                row[c] = int(cell) if c in ("epoch", "clipped") else float(cell)
            trace.append(row)
        return trace


def final_lambda(trace):
    """Mean constrained hyperparameters over the final 30 epochs."""
    if len(trace) < 30:
        raise ConfigError("final_lambda needs >= 30 trace rows, got %d" % len(trace))
    out = {}
    for name in trace.hyper_names:
        out[name] = float(trace.column("lambda_%s" % name)[-30:].mean())
    return out


def recovery_error(lam_learned, lam_star):
    """Per-hyperparameter absolute error in constrained space."""
    if set(lam_learned) != set(lam_star):
        raise ConfigError(
            "hyperparameter names differ: %s vs %s"
            % (sorted(lam_learned), sorted(lam_star))
        )
    return {n: abs(float(lam_learned[n]) - float(lam_star[n])) for n in lam_learned}


@dataclass
class FitResult:
    model_name: str
    lambda_final: dict
    trace: TrainingTrace
    lambda_init: dict
    seconds_total: float


# -------------------------------------------------------------- fit internals

def _validate_expert(model, expert_stats):
    by_id = {}
    for s in expert_stats:
        if s.id in by_id:
            raise ConfigError("duplicate expert statistic id %r" % (s.id,))
        by_id[s.id] = s
    want = model.target_ids()
    missing = [t for t in want if t not in by_id]
    extra = [t for t in by_id if t not in want]
    if missing or extra:
        raise ConfigError(
            "expert statistics do not match model %s targets (missing: %s, unexpected: %s)"
            % (model.name, missing or "none", extra or "none")
        )
    for t in model.targets:
        s = by_id[t.id]
        if s.technique.tag != t.technique.tag:
            raise ConfigError(
                "statistic %r: technique %s does not match the model's %s"
                % (t.id, s.technique.tag, t.technique.tag)
            )
        if t.technique.tag == "quantiles" and tuple(s.technique.probs) != tuple(t.technique.probs):
            raise ConfigError("statistic %r: quantile grids differ" % (t.id,))
    return by_id


def initial_lambda(model, cfg):
    """Unconstrained starting coordinates, drawn from documented ranges.

    Locations default to uniform(-2, 2), positive slots to softplus-inverse
    of uniform(0.01, 1); per-model ranges (fixture or config) override, in
    constrained space. cfg.init_lambda pins exact constrained values.
    """
    ranges = dict(model.init_ranges or {})
    if cfg.init_ranges:
        ranges.update(cfg.init_ranges)
    scales = model.scale_hypers
    raw = {}
    for name in model.hyper_names:
        if cfg.init_lambda is not None and name in cfg.init_lambda:
            value = float(cfg.init_lambda[name])
        else:
            u = float(samplers.uniform_noise(cfg.seed, ("init", name), ()))
            if name in ranges:
                lo, hi = ranges[name]
                value = float(lo) + (float(hi) - float(lo)) * u
            elif name in scales:
                value = 0.01 + 0.99 * u
            else:
                value = -2.0 + 4.0 * u
        raw[name] = models.softplus_inverse(value) if name in scales else value
    return raw


def _batch_chunks(batch_size, chunk):
    return [
        tuple(range(start, min(start + chunk, batch_size)))
        for start in range(0, batch_size, chunk)
    ]


class _ChunkGraph:
    __slots__ = ("tape", "leaves", "stats")

    def __init__(self, tape, leaves, stats):
        self.tape = tape
        self.leaves = leaves
        self.stats = stats


def _run_chunk(model, raw, source, cfg, batch):
    """Forward one batch chunk to its per-target statistic nodes."""
    tape = autodiff.Tape()
    leaves = {n: tape.input(np.asarray(raw[n])) for n in model.hyper_names}
    lam = models.constrain(model, leaves)
    draws = models.forward(
        model, lam, source, cfg.model_samples, batch=batch, gumbel_tau=cfg.gumbel_tau
    )
    stats = {}
    for t in model.targets:
        stats[t.id] = elicitation.apply_technique(t.technique, draws[t.id])
    return _ChunkGraph(tape, leaves, stats)


def _graph_bytes(tape):
    return sum(n.values.nbytes for n in tape.nodes)


def _map_chunks(fn, chunks, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, chunks))
    return [fn(c) for c in chunks]


def fit(model, expert_stats, cfg, progress=None):
    """Minimize the weighted statistic discrepancies; returns a FitResult.

    Deterministic for a given (model, expert_stats, cfg) including the seed:
    the trace is identical for any cfg.jobs.
    """
    by_id = _validate_expert(model, expert_stats)
    if cfg.truncation is not None:
        if model.likelihood != "poisson":
            raise ConfigError("truncation override only applies to count models")
        model = replace(model, truncation=int(cfg.truncation))

    raw = initial_lambda(model, cfg)
    lambda_init = models.constrain(model, raw)
    adam = AdamState(model.hyper_names)
    trace = TrainingTrace(model.target_ids(), model.hyper_names)
    chunks = _batch_chunks(cfg.batch_size, cfg.chunk)
    keep_graphs = True
    t_start = time.perf_counter()

    for epoch in range(cfg.epochs):
        t_epoch = time.perf_counter()
        source = models.NoiseSource(cfg.seed, ("model", epoch))
        weights = losses.dwa_weights(trace.loss_history(), cfg.dwa_temperature)

        try:
            # phase A: per-chunk statistic graphs (or just their values)
            def phase_a(batch):
                graph = _run_chunk(model, raw, source, cfg, batch)
                if keep_graphs:
                    return graph
                vals = {tid: node.values for tid, node in graph.stats.items()}
                return _ChunkGraph(None, None, vals)

            if epoch == 0:
                first = _run_chunk(model, raw, source, cfg, chunks[0])
                keep_graphs = _graph_bytes(first.tape) * len(chunks) <= KEEP_GRAPH_BUDGET_BYTES
                if not keep_graphs:
                    first = _ChunkGraph(None, None, {t: n.values for t, n in first.stats.items()})
                graphs = [first] + _map_chunks(phase_a, chunks[1:], cfg.jobs)
            else:
                graphs = _map_chunks(phase_a, chunks, cfg.jobs)

            # phase B: joint loss over chunk statistics, gradients per part
            tape2 = autodiff.Tape()
            part_leaves = {
                t.id: [
                    tape2.input(g.stats[t.id] if g.tape is None else g.stats[t.id].values)
                    for g in graphs
                ]
                for t in model.targets
            }
            component = []
            for t in model.targets:
                combined = autodiff.concat(part_leaves[t.id], axis=0)
                if t.technique.tag == "histogram":
                    idx = elicitation.stride_indices(combined.values.shape[0], t.technique.cap)
                    if idx.size != combined.values.shape[0]:
                        combined = autodiff.take_last(combined, idx)
                    combined = autodiff.reshape(combined, (-1, 1))
                expert_mat = by_id[t.id].values
                if cfg.normalize:
                    combined, expert_mat = losses.normalize_pair(combined, expert_mat)
                loss = losses.mmd2_biased(combined, expert_mat, cfg.kernel)
                if not np.isfinite(float(loss.values)):
                    raise TrainingAbort(epoch, t.id, "non-finite component loss")
                component.append(loss)
            total = losses.total_loss(component, weights)
            total_val = float(total.values)
            if not np.isfinite(total_val):
                raise TrainingAbort(epoch, "total", "non-finite total loss")
            flat_leaves = [lf for t in model.targets for lf in part_leaves[t.id]]
            part_grads = tape2.gradient(total, flat_leaves)
            seeds_per_chunk = [dict() for _ in chunks]
            k = 0
            for t in model.targets:
                for ci in range(len(chunks)):
                    seeds_per_chunk[ci][t.id] = part_grads[k]
                    k += 1

            # phase C: chunk adjoints back to the hyperparameters
            def phase_c(args):
                ci, graph = args
                if graph.tape is None:
                    graph = _run_chunk(model, raw, source, cfg, chunks[ci])
                graph.tape.backward(
                    {graph.stats[t.id]: seeds_per_chunk[ci][t.id] for t in model.targets}
                )
                out = {}
                for n in model.hyper_names:
                    leaf = graph.leaves[n]
                    out[n] = float(leaf.adjoint) if leaf.adjoint is not None else 0.0
                    leaf.adjoint = None
                return out

            chunk_grads = _map_chunks(phase_c, list(enumerate(graphs)), cfg.jobs)
        except NonFiniteError as e:
            raise TrainingAbort(epoch, str(e), "non-finite value in simulation graph") from e

        del graphs
        grad = {n: 0.0 for n in model.hyper_names}
        for cg in chunk_grads:
            for n in model.hyper_names:
                grad[n] += cg[n]
        gradnorm = {n: abs(grad[n]) for n in model.hyper_names}
        gnorm = float(np.sqrt(sum(g * g for g in grad.values())))
        clipped = 0
        if gnorm > CLIP_NORM:
            clipped = 1
            scale = CLIP_NORM / gnorm
            grad = {n: g * scale for n, g in grad.items()}

        step_lr = lr(epoch, cfg)
        try:
            raw = adam.step(raw, grad, step_lr)
        except ValueError as e:
            raise TrainingAbort(epoch, "adam", str(e)) from e
        lam_now = models.constrain(model, raw)

        row = {"epoch": epoch, "total_loss": total_val, "lr": step_lr,
               "clipped": clipped, "seconds": time.perf_counter() - t_epoch}
        for t, l, w in zip(model.targets, component, weights):
            row["loss_%s" % t.id] = float(l.values)
            row["weight_%s" % t.id] = float(w)
        for n in model.hyper_names:
            row["lambda_%s" % n] = float(lam_now[n])
            row["gradnorm_%s" % n] = gradnorm[n]
        trace.append(row)
        if progress is not None:
            progress(epoch, row)

    if len(trace) >= 30:
        lam_final = final_lambda(trace)
    else:
        lam_final = {n: float(trace.column("lambda_%s" % n)[-1]) for n in model.hyper_names}
    return FitResult(
        model_name=model.name,
        lambda_final=lam_final,
        trace=trace,
        lambda_init={k: float(v) for k, v in lambda_init.items()},
        seconds_total=time.perf_counter() - t_start,
    )
