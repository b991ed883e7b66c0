"""Mask-producing pruning algorithms and test-error evaluation."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .model import (
    MaskMatrix,
    OracleNetwork,
    SampleSet,
    Seed,
    WeightMatrix,
    forward_array,
    make_rng,
    mask_accuracy,
    pruning_ratio,
)
from .risk import masked_gradient, risk_and_grad
from .trainer import TrainConfig, agd_train

REWIND_MODES = ("to_init", "none")
GRASP_SELECTIONS = ("score", "abs_score")
IMP_CSV_HEADER = ("seed", "round", "ratio", "mask_accuracy", "test_error", "iterations")


@dataclass(frozen=True)
class PruneSchedule:
    rounds: int = 10
    per_round_fraction: float = 0.2
    rewind: str = "to_init"

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not 0 < self.per_round_fraction < 1:
            raise ValueError("per_round_fraction must lie in (0, 1)")
        if self.rewind not in REWIND_MODES:
            raise ValueError(f"rewind must be one of {REWIND_MODES}")

    @property
    def cumulative_survival(self) -> float:
        return (1.0 - self.per_round_fraction) ** self.rounds


@dataclass(frozen=True)
class PrunedRunRecord:
    round: int
    mask: MaskMatrix
    pruning_ratio: float
    mask_accuracy: float
    test_error: float
    iterations: int
    note: str = ""


def magnitude_prune(W: WeightMatrix, keep_per_neuron: Sequence[int]) -> MaskMatrix:
    """Keep the ``keep_per_neuron[j]`` largest-|w| entries of each column.

    Ties go to the lowest row index.
    """
    keep = np.asarray(keep_per_neuron, dtype=int)
    if keep.shape != (W.K,):
        raise ValueError(f"need one keep count per neuron ({W.K})")
    if np.any(keep < 1) or np.any(keep > W.d):
        raise ValueError(f"keep counts must lie in [1, d={W.d}]")
    out = np.zeros((W.d, W.K), dtype=bool)
    for j in range(W.K):
        order = np.argsort(-np.abs(W.entries[:, j]), kind="stable")
        out[order[: keep[j]], j] = True
    return MaskMatrix(out)


def _global_keep(scores: np.ndarray, eligible: np.ndarray, n_keep: int) -> np.ndarray:
    """Top-``n_keep`` eligible coordinates by score, each column keeping >= 1."""
    d, K = scores.shape
    flat = np.where(eligible, scores, -np.inf).ravel()
    # Stable sort on the negated score: ties resolve to the lowest flat index.
    order = np.argsort(-flat, kind="stable")
    keep = np.zeros(d * K, dtype=bool)
    keep[order[:n_keep]] = True
    keep = keep.reshape(d, K) & eligible
    for j in np.flatnonzero(~keep.any(axis=0)):
        col = np.where(eligible[:, j], scores[:, j], -np.inf)
        keep[int(np.argmax(col)), j] = True
    return keep


def grasp_scores(W: WeightMatrix, data: SampleSet, rel_step: float = 1e-6):
    """Gradient-signal-preservation scores -W ⊙ (H g) and the finite-difference H g.

    H g is a forward difference of masked gradients along g with step
    ``rel_step * ||W|| / ||g||``. Returns ``(scores, Hg, g)`` as arrays, or
    ``None`` for a zero gradient.
    """
    g = masked_gradient(W, data).entries
    gn = np.linalg.norm(g)
    if gn == 0:
        return None
    h = rel_step * max(W.norm(), 1.0) / gn
    _, g_shift = risk_and_grad(W.entries + h * g, data.inputs, data.labels, W.mask.entries)
    Hg = (g_shift - g) / h
    return -W.entries * Hg, Hg, g


def grasp_prune(
    data: SampleSet,
    mask_full: MaskMatrix,
    warmup: TrainConfig,
    target_ratio: float,
    seed: Seed = 0,
    W0: Optional[WeightMatrix] = None,
    selection: str = "score",
) -> MaskMatrix:
    """GraSP-style one-shot mask from briefly trained weights.

    Runs ``warmup.max_iters`` AGD iterations (20 in the reference protocol)
    from ``W0`` (default: i.i.d. uniform [-0.5, 0.5] on ``mask_full``),
    scores every weight by s = -W ⊙ (H g) and keeps the highest scores across
    the whole layer until the pruning ratio reaches ``target_ratio`` percent.
    ``selection="abs_score"`` ranks by |s| instead.
    """
    if not 0 <= target_ratio < 100:
        raise ValueError("target_ratio must lie in [0, 100)")
    if selection not in GRASP_SELECTIONS:
        raise ValueError(f"unknown selection {selection!r}")
    if W0 is None:
        rng = make_rng(seed)
        W0 = WeightMatrix.project(rng.uniform(-0.5, 0.5, mask_full.entries.shape), mask_full)
    n_total = mask_full.n_params
    n_keep = max(mask_full.K, int(round((1.0 - target_ratio / 100.0) * mask_full.d * mask_full.K)))
    if n_keep >= n_total:
        return mask_full
    warm = agd_train(data, mask_full, W0, warmup.replace(rel_change_tol=1e-300)).final_weights
    scored = grasp_scores(warm, data)
    if scored is None:
        warnings.warn("zero gradient after warm-up; falling back to magnitude scores")
        scores = np.abs(warm.entries)
    else:
        scores = scored[0] if selection == "score" else np.abs(scored[0])
    return MaskMatrix(_global_keep(scores, mask_full.entries, n_keep))


def _arccos_kernel(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """E[relu(a^T x) relu(b^T x)] for x ~ N(0, I), all column pairs."""
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    outer = na[:, None] * nb[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(outer > 0, (A.T @ B) / outer, 1.0)
    theta = np.arccos(np.clip(cos, -1.0, 1.0))
    return outer * (np.sin(theta) + (np.pi - theta) * np.cos(theta)) / (2 * np.pi)


def population_test_error(W, oracle: OracleNetwork, noisy: bool = True) -> float:
    """Closed-form RMS prediction error over the Gaussian input distribution."""
    A = np.asarray(W.entries if isinstance(W, WeightMatrix) else W, dtype=float)
    B = oracle.weights.entries
    K = A.shape[1]
    mse = (_arccos_kernel(A, A).sum() - 2 * _arccos_kernel(A, B).sum() + _arccos_kernel(B, B).sum()) / K ** 2
    if noisy:
        mse += oracle.noise_sigma ** 2
    return math.sqrt(max(mse, 0.0))


def test_error(
    W: WeightMatrix,
    oracle: OracleNetwork,
    N_test: int = 100_000,
    seed: Seed = 0,
    noisy: bool = True,
    chunk: int = 20_000,
) -> float:
    """RMS error of W's predictions on ``N_test`` fresh samples from the oracle."""
    if N_test < 1:
        raise ValueError("N_test must be >= 1")
    rng = make_rng(seed)
    total = 0.0
    done = 0
    while done < N_test:
        n = min(chunk, N_test - done)
        X = rng.standard_normal((n, oracle.d))
        noise = rng.standard_normal(n)
        y = forward_array(oracle.weights.entries, X)
        if noisy and oracle.noise_sigma > 0:
            y = y + oracle.noise_sigma * noise
        res = forward_array(W.entries, X) - y
        total += float(res @ res)
        done += n
    return math.sqrt(total / N_test)


def _prune_global(W: np.ndarray, mask: np.ndarray, fraction: float) -> Optional[np.ndarray]:
    """Drop ``fraction`` of surviving weights by smallest |w|, keeping one per neuron."""
    surviving = int(mask.sum())
    n_remove = int(round(fraction * surviving))
    if n_remove == 0:
        return None
    counts = mask.sum(axis=0)
    flat_mag = np.where(mask, np.abs(W), np.inf).ravel()
    order = np.argsort(flat_mag, kind="stable")
    out = mask.copy().ravel()
    K = mask.shape[1]
    removed = 0
    for idx in order:
        if removed == n_remove or not np.isfinite(flat_mag[idx]):
            break
        j = idx % K
        if counts[j] > 1:
            out[idx] = False
            counts[j] -= 1
            removed += 1
    if removed == 0:
        return None
    return out.reshape(mask.shape)


def imp(
    oracle_data: SampleSet,
    schedule: PruneSchedule,
    config: TrainConfig,
    W_init: WeightMatrix,
    oracle_for_metrics: Optional[OracleNetwork] = None,
    N_test: int = 100_000,
    test_seed: Seed = 0,
    permute_accuracy: bool = True,
) -> List[PrunedRunRecord]:
    """Iterative magnitude pruning: train, prune globally by magnitude, rewind.

    Round 0 trains on ``W_init``'s mask. Each later round removes
    ``per_round_fraction`` of the surviving weights (never emptying a
    neuron) and restarts from ``W_init`` restricted to the new mask
    (``rewind="to_init"``) or from the trained weights (``"none"``).
    """
    records: List[PrunedRunRecord] = []
    mask = W_init.mask
    start = W_init
    for rnd in range(schedule.rounds + 1):
        trace = agd_train(oracle_data, mask, start, config)
        W = trace.final_weights
        acc = err = math.nan
        if oracle_for_metrics is not None:
            acc = mask_accuracy(mask, oracle_for_metrics.mask, permute=permute_accuracy)
            err = test_error(W, oracle_for_metrics, N_test, test_seed)
        note = trace.reason if trace.reason == "diverged" else ""
        if rnd == schedule.rounds:
            records.append(PrunedRunRecord(rnd, mask, pruning_ratio(mask), acc, err, trace.n_iterations, note))
            break
        new = _prune_global(W.entries, mask.entries, schedule.per_round_fraction)
        if new is None:
            records.append(PrunedRunRecord(rnd, mask, pruning_ratio(mask), acc, err, trace.n_iterations,
                                           "no prunable weights left"))
            break
        records.append(PrunedRunRecord(rnd, mask, pruning_ratio(mask), acc, err, trace.n_iterations, note))
        mask = MaskMatrix(new)
        source = W_init.entries if schedule.rewind == "to_init" else W.entries
        start = WeightMatrix.project(source, mask)
    return records


def records_to_csv(records: Sequence[PrunedRunRecord], seed) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(IMP_CSV_HEADER)
    for r in records:
        w.writerow([seed, r.round, repr(r.pruning_ratio), repr(r.mask_accuracy), repr(r.test_error), r.iterations])
    return buf.getvalue()
