"""Masked accelerated gradient descent (heavy-ball momentum) and its helpers."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import (
    MaskMatrix,
    OracleNetwork,
    SampleSet,
    Seed,
    WeightMatrix,
    align_permutation,
    make_rng,
    sample_dataset,
)
from .risk import risk_and_grad
from .stats import affine_fit

PARTITION_MODES = ("reuse_full", "fresh_subsets")
TRACE_CSV_HEADER = ("iter", "rel_error", "risk", "rel_change")


def theorem_step_size(K: int) -> float:
    """The proof-scaled step size eta = K / 14."""
    return K / 14.0


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.5
    beta: float = 0.2
    max_iters: int = 10000
    rel_change_tol: float = 1e-8
    partition_mode: str = "reuse_full"
    n_subsets: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not 0 <= self.beta < 1:
            raise ValueError(f"beta must lie in [0,1), got {self.beta}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_change_tol > 0:
            raise ValueError("rel_change_tol must be positive")
        if self.partition_mode not in PARTITION_MODES:
            raise ValueError(f"partition_mode must be one of {PARTITION_MODES}")
        if self.n_subsets < 1:
            raise ValueError("n_subsets (T) must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class TrainTrace:
    """Per-iteration record of one AGD run.

    Row ``t`` describes iterate ``W^(t)``: its aligned relative error (NaN
    without an oracle), its empirical risk on the full data set, and the
    relative change from ``W^(t-1)`` (NaN at ``t = 0``).
    """

    iteration: np.ndarray
    rel_error: np.ndarray
    risk: np.ndarray
    rel_change: np.ndarray
    final_weights: WeightMatrix
    reason: str
    monitor: Optional[np.ndarray] = field(default=None, compare=False)

    @property
    def n_iterations(self) -> int:
        return int(self.iteration[-1])

    @property
    def final_rel_error(self) -> float:
        return float(self.rel_error[-1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_CSV_HEADER)
        for row in zip(self.iteration, self.rel_error, self.risk, self.rel_change):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


class _ErrorTracker:
    """Aligned relative error restricted to the rows the learner can touch."""

    def __init__(self, W_star: np.ndarray, rows: np.ndarray):
        self.ref = float(np.linalg.norm(W_star))
        self.Ws = W_star[rows]
        self.col_sq = np.einsum("ij,ij->j", W_star, W_star)

    def __call__(self, WU: np.ndarray) -> float:
        sq = np.einsum("ij,ij->j", WU, WU)
        cost = np.maximum(sq[:, None] + self.col_sq[None, :] - 2.0 * (WU.T @ self.Ws), 0.0)
        r, c = linear_sum_assignment(cost)
        # Matching uses the expanded cost; the reported error is recomputed
        # directly because the expansion cancels badly near convergence.
        diff = WU[:, r] - self.Ws[:, c]
        off = self.col_sq[c].sum() - np.einsum("ij,ij->", self.Ws[:, c], self.Ws[:, c])
        return math.sqrt(float(np.einsum("ij,ij->", diff, diff)) + max(float(off), 0.0)) / self.ref


def _subsets(N: int, config: TrainConfig):
    if config.partition_mode == "reuse_full":
        return None
    T = config.n_subsets
    if N < T:
        raise ValueError(f"cannot split {N} samples into {T} nonempty subsets")
    order = np.random.default_rng(config.seed).permutation(N)
    return np.array_split(order, T)


def agd_train(
    data: SampleSet,
    mask: MaskMatrix,
    W0: WeightMatrix,
    config: TrainConfig,
    oracle_for_metrics: Optional[OracleNetwork] = None,
    monitor: Optional[Callable[[np.ndarray], float]] = None,
) -> TrainTrace:
    """Run W+ = W - eta * M ⊙ grad f(W) + beta * (W - W_prev) from ``W0``.

    Stops when ||W+ - W||_F / ||W||_F < rel_change_tol, at ``max_iters``, or
    on a non-finite iterate (reason ``"diverged"``). In ``fresh_subsets``
    mode iteration t uses the t-th of T disjoint subsets and the run is
    capped at T iterations. ``monitor`` is called on every full d x K
    iterate and its values are stored alongside the trace.
    """
    if W0.mask != mask:
        raise ValueError("W0 does not conform to the training mask")
    if data.d != mask.d:
        raise ValueError(f"data dimension {data.d} does not match mask d={mask.d}")

    # Rows outside every support never move; drop them from the products.
    rows = np.flatnonzero(mask.entries.any(axis=1))
    XU = np.ascontiguousarray(data.inputs[:, rows])
    XUT = np.ascontiguousarray(XU.T)
    y = data.labels
    MU = mask.entries[rows]
    subsets = _subsets(data.N, config)
    max_iters = config.max_iters if subsets is None else min(config.max_iters, len(subsets))

    track = _ErrorTracker(oracle_for_metrics.weights.entries, rows) if oracle_for_metrics else None
    full = np.zeros(mask.entries.shape)

    def expand(WU):
        full[rows] = WU
        return full.copy()

    # Overflow on a diverging run is caught by the finiteness checks below.
    def step_grad(WU, t):
        with np.errstate(over="ignore", invalid="ignore"):
            if subsets is None:
                return risk_and_grad(WU, XU, y, MU, XUT)
            idx = subsets[t]
            return risk_and_grad(WU, XU[idx], y[idx], MU, np.ascontiguousarray(XUT[:, idx]))

    def full_risk(WU, risk_t):
        if subsets is None:
            return risk_t
        with np.errstate(over="ignore", invalid="ignore"):
            return risk_and_grad(WU, XU, y, MU, XUT)[0]

    W = np.array(W0.entries[rows])
    W_prev = W.copy()
    its, errs, risks, changes, mons = [], [], [], [], []

    risk, G = step_grad(W, 0)
    its.append(0)
    errs.append(track(W) if track else math.nan)
    risks.append(full_risk(W, risk))
    changes.append(math.nan)
    if monitor:
        mons.append(monitor(expand(W)))

    reason = "iteration_cap"
    for t in range(max_iters):
        with np.errstate(over="ignore", invalid="ignore"):
            W_new = W - config.eta * G + config.beta * (W - W_prev)
        if not np.all(np.isfinite(W_new)):
            reason = "diverged"
            break
        base = np.linalg.norm(W)
        diff = np.linalg.norm(W_new - W)
        change = diff / base if base > 0 else (0.0 if diff == 0 else math.inf)
        W_prev, W = W, W_new
        if t + 1 < max_iters or subsets is None:
            risk, G = step_grad(W, min(t + 1, max_iters - 1))
        if not math.isfinite(risk):
            reason = "diverged"
            break
        its.append(t + 1)
        errs.append(track(W) if track else math.nan)
        risks.append(full_risk(W, risk))
        changes.append(change)
        if monitor:
            mons.append(monitor(expand(W)))
        if change < config.rel_change_tol:
            reason = "converged"
            break

    W_final = W if reason != "diverged" else W_prev
    if reason == "diverged" and not np.all(np.isfinite(W_final)):
        W_final = np.zeros_like(W_final)
    return TrainTrace(
        iteration=np.array(its),
        rel_error=np.array(errs),
        risk=np.array(risks),
        rel_change=np.array(changes),
        final_weights=WeightMatrix(expand(W_final), mask),
        reason=reason,
        monitor=np.array(mons) if monitor else None,
    )


def random_ball_init(
    oracle: OracleNetwork,
    lam: float,
    learner_mask: MaskMatrix,
    seed: Seed = 0,
    check: bool = True,
) -> WeightMatrix:
    """Random point W* + Delta with ||Delta||_F / ||W*||_F uniform on (0, lam).

    Delta is supported on ``learner_mask`` with a uniformly random direction.
    The center is W* with its columns matched to the learner mask; if the
    mask does not cover the oracle support the center is projected onto it
    (with a warning when ``check`` is set).
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if learner_mask.entries.shape != oracle.mask.entries.shape:
        raise ValueError("learner mask shape differs from the oracle's")
    rng = make_rng(seed)
    m_star = oracle.mask.entries.astype(np.int64)
    overlap = m_star.T @ learner_mask.entries.astype(np.int64)
    if np.all(overlap.diagonal() == m_star.sum(axis=0)):
        perm = np.arange(oracle.K)
    else:
        r, c = linear_sum_assignment(overlap, maximize=True)
        perm = np.empty(oracle.K, dtype=int)
        perm[c] = r
    covered = overlap[perm, np.arange(oracle.K)].sum() == m_star.sum()
    if not covered and check:
        warnings.warn("learner mask does not cover the oracle support; projecting W* onto it")
    center = np.where(learner_mask.entries, oracle.weights.entries[:, perm], 0.0)

    rows, cols = np.nonzero(learner_mask.entries)
    direction = rng.standard_normal(rows.size)
    direction /= np.linalg.norm(direction)
    radius = rng.uniform(0.0, lam) * oracle.weights.norm()
    delta = np.zeros(learner_mask.entries.shape)
    delta[rows, cols] = radius * direction
    return WeightMatrix(center + delta, learner_mask)


def estimate_rate(trace: TrainTrace, success_tol: float = 1e-4, min_points: int = 10) -> float:
    """Geometric decay factor nu from a least-squares fit of log(rel_error) vs t.

    Only the leading segment above max(10 * success_tol, 3 * final error) is
    used, so the noise plateau does not flatten the fit.
    """
    err = np.asarray(trace.rel_error, dtype=float)
    it = np.asarray(trace.iteration, dtype=float)
    if not np.all(np.isfinite(err)) or trace.reason == "diverged":
        raise ValueError("no linear regime detected: trace has no finite error record")
    floor = max(10.0 * success_tol, 3.0 * float(err[-1]))
    below = np.flatnonzero(err < floor)
    stop = below[0] if below.size else err.size
    if stop < min_points:
        raise ValueError(f"no linear regime detected: only {stop} iterations above the floor {floor:.3g}")
    slope = np.polyfit(it[:stop], np.log(err[:stop]), 1)[0]
    if not slope < 0:
        raise ValueError("no linear regime detected: error is not decreasing")
    return float(np.exp(slope))


def log_linear_r2(trace: TrainTrace, success_tol: float = 1e-4) -> float:
    """R^2 of the affine fit of log(rel_error) vs t over the converging segment."""
    err = np.asarray(trace.rel_error, dtype=float)
    it = np.asarray(trace.iteration, dtype=float)
    floor = max(10.0 * success_tol, 3.0 * float(err[-1]))
    below = np.flatnonzero(err < floor)
    stop = below[0] if below.size else err.size
    return affine_fit(it[:stop], np.log(err[:stop])).r2


@dataclass(frozen=True)
class TrialResult:
    success: bool
    final_rel_error: float
    iterations: int
    reason: str
    rate: float = math.nan


def run_trial(
    oracle: OracleNetwork,
    N: int,
    learner_mask: MaskMatrix,
    lam: float,
    config: TrainConfig,
    success_tol: float = 1e-4,
    seed: Seed = 0,
    with_rate: bool = False,
) -> TrialResult:
    """Sample data, initialize in the random ball, train, and score one trial."""
    if not success_tol > 0:
        raise ValueError("success_tol must be positive")
    data_seed, init_seed = np.random.SeedSequence(seed).spawn(2) if not isinstance(
        seed, np.random.SeedSequence) else seed.spawn(2)
    data = sample_dataset(oracle, N, data_seed)
    W0 = random_ball_init(oracle, lam, learner_mask, init_seed)
    trace = agd_train(data, learner_mask, W0, config, oracle)
    if trace.reason == "diverged":
        return TrialResult(False, math.inf, trace.n_iterations, trace.reason)
    err = align_permutation(trace.final_weights, oracle.weights).relative_error
    rate = math.nan
    if with_rate:
        try:
            rate = estimate_rate(trace, success_tol)
        except ValueError:
            pass
    return TrialResult(bool(err < success_tol), err, trace.n_iterations, trace.reason, rate)
