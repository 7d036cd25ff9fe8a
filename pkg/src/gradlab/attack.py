"""Hessian-free gradients matching by zeroth-order direct search.

Given an observed gradient, the attacker searches for features ``x`` whose
gradient (under the known transcript and length) matches it. Each iteration
samples ``k`` random unit moves, each touching a single frame, scores every
``x + step * v`` with the gradient distance, and applies the sum of the moves
that lowered the distance. The step is halved whenever a whole window of
iterations fails to improve the distance by the configured fraction, and the
search stops once halving would take it below ``terminal_step``.

Three entry points share that loop:

* :func:`hfgm_reconstruct` for a single-sample gradient;
* :func:`hfgm_batch` for a gradient averaged over a batch, updating one sample
  per iteration against cached per-sample gradients;
* :func:`hfgm_multistep` for a parameter change produced by several local SGD
  steps, replayed from the original parameters for every candidate.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import frame_mae
from .ctc import check_feasible
from .errors import ConfigError, ShapeMismatch, ZeroGradient
from .model import ParamVector, batch_loss_and_full, batch_loss_and_view, view_of

DISTANCES = ("cosine", "euclidean", "cosine_tv")


@dataclass(frozen=True)
class Distance:
    kind: str = "cosine"
    tv_weight: float = 0.0

    def __post_init__(self):
        if self.kind not in DISTANCES:
            raise ConfigError(f"unknown distance {self.kind!r}")
        if self.tv_weight < 0:
            raise ConfigError("tv_weight must be >= 0")


@dataclass(frozen=True)
class ScheduleConfig:
    initial_step: float = 1.0
    halving_window: int = 2500
    improvement_threshold: float = 0.05
    terminal_step: float = 0.125
    samplings: int = 128
    max_iterations: int = 100_000
    tolerance: float = 1e-12
    guarded: bool = False
    log_every: int = 100

    def __post_init__(self):
        if not self.terminal_step < self.initial_step:
            raise ConfigError("terminal_step must be smaller than initial_step")
        if not 0 < self.improvement_threshold < 1:
            raise ConfigError("improvement_threshold must lie in (0, 1)")
        if self.samplings < 1 or self.halving_window < 1:
            raise ConfigError("samplings and halving_window must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


MULTISTEP_SAMPLINGS = 8


@dataclass
class TraceRow:
    iteration: int
    objective: float
    step: float
    mae_mean: float = float("nan")
    frame_mae: Optional[np.ndarray] = None


@dataclass
class ReconstructionTrace:
    rows: list[TraceRow] = field(default_factory=list)
    stop_reason: str = ""
    steps_visited: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return self.rows[-1].iteration if self.rows else 0

    @property
    def final_objective(self) -> float:
        return self.rows[-1].objective

    def write_csv(self, path: Path) -> None:
        width = max((len(r.frame_mae) for r in self.rows if r.frame_mae is not None), default=0)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "D", "alpha", "mae_mean"] + [f"mae_frame_{i}" for i in range(width)])
            for r in self.rows:
                frames = [] if r.frame_mae is None else [repr(float(v)) for v in r.frame_mae]
                w.writerow([r.iteration, repr(float(r.objective)), repr(float(r.step)),
                            repr(float(r.mae_mean))] + frames)


@dataclass
class AttackProblem:
    params: ParamVector
    target: np.ndarray
    transcript: list[int]
    length: int
    distance: Distance = Distance()
    schedule: ScheduleConfig = ScheduleConfig()
    init_seed: int = 0
    ground_truth: Optional[np.ndarray] = None

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.length < 1:
            raise ConfigError("length must be >= 1")
        check_feasible(self.transcript, self.length, self.params.config.alphabet_size)


# -- distances ---------------------------------------------------------------

def total_variation(xs: np.ndarray) -> np.ndarray:
    """Anisotropic total variation along the frame axis, for (..., T, d)."""
    return np.abs(np.diff(xs, axis=-2)).sum(axis=(-2, -1))


def distance_values(views: np.ndarray, target: np.ndarray, distance: Distance,
                    xs: Optional[np.ndarray] = None) -> np.ndarray:
    """Distance of each row of ``views`` (K, P) to ``target``.

    Rows with a vanishing gradient get ``inf`` under cosine so that they are
    never accepted; :func:`grad_distance` raises instead.
    """
    if distance.kind == "euclidean":
        return ((views - target) ** 2).sum(axis=1)
    t_norm = np.linalg.norm(target)
    if t_norm == 0.0:
        raise ZeroGradient("target gradient has zero norm")
    norms = np.linalg.norm(views, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = 1.0 - (views @ (target / t_norm)) / norms
    d = np.where(norms > 0, d, np.inf)
    if distance.kind == "cosine_tv":
        d = d + distance.tv_weight * total_variation(xs)
    return d


def grad_distance(x: np.ndarray, problem: AttackProblem) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.length, problem.params.config.input_dim):
        raise ShapeMismatch(f"expected {(problem.length, problem.params.config.input_dim)}, got {x.shape}")
    _, views = batch_loss_and_view(problem.params, x[None], problem.transcript)
    if problem.distance.kind != "euclidean" and np.linalg.norm(views[0]) == 0.0:
        raise ZeroGradient("dummy gradient has zero norm")
    return float(distance_values(views, problem.target, problem.distance, x[None])[0])


def make_objective(params: ParamVector, transcript: Sequence[int], target: np.ndarray,
                   distance: Distance) -> Callable[[np.ndarray], np.ndarray]:
    def objective(xs: np.ndarray) -> np.ndarray:
        _, views = batch_loss_and_view(params, xs, transcript)
        return distance_values(views, target, distance, xs)
    return objective


# -- search machinery --------------------------------------------------------

def sample_unit_vectors(k: int, T: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` unit-norm (T, d) moves, each supported on one uniformly chosen frame."""
    if k < 1:
        raise ValueError("k must be >= 1")
    frames = rng.integers(0, T, size=k)
    dirs = rng.standard_normal((k, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    out = np.zeros((k, T, d))
    out[np.arange(k), frames] = dirs
    return out


def update_schedule(step: float, window_start: float, window_end: float,
                    schedule: ScheduleConfig) -> Optional[float]:
    """Step size for the next window, or ``None`` to terminate.

    Improvement is measured relative to the objective at the start of the window.
    """
    improvement = (window_start - window_end) / window_start if window_start > 0 else 0.0
    if improvement >= schedule.improvement_threshold:
        return step
    halved = step / 2.0
    if halved < schedule.terminal_step:
        return None
    return halved


def initial_guess(T: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(T, d))


def _trace_row(iteration, objective, step, xs, truths) -> TraceRow:
    if truths is None:
        return TraceRow(iteration, float(objective), step)
    maes = []
    frames = None
    for x, truth in zip(xs, truths):
        if truth is None:
            continue
        T = truth.shape[0]
        aligned = np.zeros_like(truth)
        n = min(T, x.shape[0])
        aligned[:n] = x[:n]
        fm = frame_mae(aligned, truth)
        maes.append(fm.mean())
        frames = fm if len(xs) == 1 else None
    mean = float(np.mean(maes)) if maes else float("nan")
    return TraceRow(iteration, float(objective), step, mean, frames)


def _direct_search(x0: np.ndarray, objective, schedule: ScheduleConfig, rng: np.random.Generator,
                   truth: Optional[np.ndarray]):
    """Single-input search loop shared by the single-sample and multi-step attacks."""
    x = x0.copy()
    T, d = x.shape
    current = float(objective(x[None])[0])
    step = schedule.initial_step
    trace = ReconstructionTrace(steps_visited=[step])
    truths = None if truth is None else [truth]
    trace.rows.append(_trace_row(0, current, step, [x], truths))
    window_start = current
    it = 0
    while True:
        if current <= schedule.tolerance:
            trace.stop_reason = "tolerance"
            break
        if it >= schedule.max_iterations:
            trace.stop_reason = "max_iterations"
            break
        moves = sample_unit_vectors(schedule.samplings, T, d, rng)
        scores = objective(x[None] + step * moves)
        accepted = scores < current
        if accepted.any():
            proposal = x + step * moves[accepted].sum(axis=0)
            new = float(objective(proposal[None])[0])
            if not (schedule.guarded and new > current):
                x, current = proposal, new
        it += 1
        stop = False
        if it % schedule.halving_window == 0:
            nxt = update_schedule(step, window_start, current, schedule)
            if nxt is None:
                trace.stop_reason = "terminal_step"
                stop = True
            else:
                if nxt != step:
                    trace.steps_visited.append(nxt)
                step, window_start = nxt, current
        if stop or it % schedule.log_every == 0:
            trace.rows.append(_trace_row(it, current, step, [x], truths))
        if stop:
            return x, trace
    if trace.rows[-1].iteration != it:
        trace.rows.append(_trace_row(it, current, step, [x], truths))
    return x, trace


def hfgm_reconstruct(problem: AttackProblem):
    """Reconstruct features from one observed gradient view.

    Returns the final (T, d) estimate and its :class:`ReconstructionTrace`.
    """
    cfg = problem.params.config
    rng = np.random.default_rng(problem.init_seed)
    x0 = initial_guess(problem.length, cfg.input_dim, rng)
    objective = make_objective(problem.params, problem.transcript, problem.target, problem.distance)
    return _direct_search(x0, objective, problem.schedule, rng, problem.ground_truth)


# -- averaged gradients of a batch ----------------------------------------------

@dataclass
class BatchAttackProblem:
    params: ParamVector
    target: np.ndarray
    transcripts: list[list[int]]
    lengths: list[int]
    distance: Distance = Distance()
    schedule: ScheduleConfig = ScheduleConfig()
    init_seed: int = 0
    ground_truths: Optional[list[np.ndarray]] = None

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if not self.transcripts or len(self.transcripts) != len(self.lengths):
            raise ConfigError("need one transcript per length and at least one sample")
        for y, T in zip(self.transcripts, self.lengths):
            check_feasible(y, T, self.params.config.alphabet_size)


def averaged_view(views: Sequence[np.ndarray]) -> np.ndarray:
    total = np.zeros_like(views[0])
    for v in views:
        total = total + v
    return total / len(views)


def hfgm_batch(problem: BatchAttackProblem):
    """Reconstruct every sample of a batch from its averaged gradient.

    Each iteration picks one sample uniformly and moves only that sample;
    the other samples contribute their cached gradients.
    """
    params = problem.params
    d = params.config.input_dim
    sched = problem.schedule
    B = len(problem.lengths)
    rng = np.random.default_rng(problem.init_seed)
    xs = [initial_guess(T, d, rng) for T in problem.lengths]

    def view_of_sample(b, stack):
        _, views = batch_loss_and_view(params, stack, problem.transcripts[b])
        return views

    cache = [view_of_sample(b, xs[b][None])[0] for b in range(B)]

    def combined_distance(views_b, b, stack):
        others = np.zeros_like(cache[0])
        for i in range(B):
            if i != b:
                others = others + cache[i]
        combined = (others + views_b) / B
        if problem.distance.kind != "cosine_tv":
            return distance_values(combined, problem.target, problem.distance)
        # total variation is summed over the whole batch with sample b swapped in
        tv_rest = sum(float(total_variation(xs[i])) for i in range(B) if i != b)
        cos = distance_values(combined, problem.target, Distance("cosine"))
        return cos + problem.distance.tv_weight * (tv_rest + total_variation(stack))

    current = float(combined_distance(cache[0][None], 0, xs[0][None])[0])
    step = sched.initial_step
    trace = ReconstructionTrace(steps_visited=[step])
    truths = problem.ground_truths
    trace.rows.append(_trace_row(0, current, step, xs, truths))
    window_start = current
    it = 0
    while True:
        if current <= sched.tolerance:
            trace.stop_reason = "tolerance"
            break
        if it >= sched.max_iterations:
            trace.stop_reason = "max_iterations"
            break
        b = int(rng.integers(0, B)) if B > 1 else 0
        T = problem.lengths[b]
        moves = sample_unit_vectors(sched.samplings, T, d, rng)
        stack = xs[b][None] + step * moves
        scores = combined_distance(view_of_sample(b, stack), b, stack)
        accepted = scores < current
        if accepted.any():
            proposal = xs[b] + step * moves[accepted].sum(axis=0)
            fresh = view_of_sample(b, proposal[None])
            new = float(combined_distance(fresh, b, proposal[None])[0])
            if not (sched.guarded and new > current):
                xs[b], cache[b], current = proposal, fresh[0], new
        it += 1
        stop = False
        if it % sched.halving_window == 0:
            nxt = update_schedule(step, window_start, current, sched)
            if nxt is None:
                trace.stop_reason = "terminal_step"
                stop = True
            else:
                if nxt != step:
                    trace.steps_visited.append(nxt)
                step, window_start = nxt, current
        if stop or it % sched.log_every == 0:
            trace.rows.append(_trace_row(it, current, step, xs, truths))
        if stop:
            return xs, trace
    if trace.rows[-1].iteration != it:
        trace.rows.append(_trace_row(it, current, step, xs, truths))
    return xs, trace


def batch_cache_view(problem: BatchAttackProblem, xs: Sequence[np.ndarray]) -> np.ndarray:
    """Averaged gradient view of ``xs`` computed from scratch."""
    views = [batch_loss_and_view(problem.params, x[None], y)[1][0] for x, y in zip(xs, problem.transcripts)]
    return averaged_view(views)


# -- multi-step local updates ---------------------------------------------------

def multistep_delta(params: ParamVector, x: np.ndarray, y: Sequence[int], steps: int, lr: float) -> np.ndarray:
    """Matched-layer view of the parameter change after ``steps`` SGD steps on (x, y).

    The change is accumulated as ``sum(-lr * g_c)`` rather than ``theta_C - theta_0``.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    theta = params.flatten()
    delta = np.zeros_like(theta)
    current = params
    for c in range(steps):
        _, g = batch_loss_and_full(current, x[None], y)
        delta = delta - lr * g[0]
        theta = theta - lr * g[0]
        if c + 1 < steps:
            current = ParamVector.unflatten(params.config, theta)
    return view_of(delta, params.config)


@dataclass
class MultiStepProblem:
    params: ParamVector
    target: np.ndarray
    transcript: list[int]
    length: int
    steps: int = 2
    local_lr: float = 1e-5
    distance: Distance = Distance()
    schedule: ScheduleConfig = ScheduleConfig(samplings=MULTISTEP_SAMPLINGS)
    init_seed: int = 0
    ground_truth: Optional[np.ndarray] = None

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        check_feasible(self.transcript, self.length, self.params.config.alphabet_size)


def hfgm_multistep(problem: MultiStepProblem):
    """Reconstruct features from the parameter change of several local SGD steps.

    Every candidate restarts from the original parameters and replays the
    local steps on its own input.
    """
    cfg = problem.params.config
    rng = np.random.default_rng(problem.init_seed)
    x0 = initial_guess(problem.length, cfg.input_dim, rng)

    def objective(xs):
        deltas = np.stack([multistep_delta(problem.params, x, problem.transcript, problem.steps,
                                           problem.local_lr) for x in xs])
        return distance_values(deltas, problem.target, problem.distance, xs)

    return _direct_search(x0, objective, problem.schedule, rng, problem.ground_truth)
