"""Empirical risk of the learner network and its first/second derivatives.

The Hessian is the Gauss-Newton matrix restricted to the free (unmasked)
coordinates. For a ReLU hidden layer with a fixed output layer this is the
exact Hessian away from the kink set {x : w_j^T x = 0}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

from .model import SampleSet, WeightMatrix, align_permutation, r_tilde

DENSE_CAP = 5000

PROBE_CSV_HEADER = ("n_params", "r_tilde", "location_error", "lambda_min", "lambda_max", "N", "seed")


@dataclass(frozen=True)
class HessianProbe:
    lambda_min: float
    lambda_max: float
    n_params: int
    location_error: float
    r_tilde: float = float("nan")
    N: int = 0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.lambda_min > self.lambda_max:
            raise ValueError("lambda_min exceeds lambda_max")

    def csv_row(self) -> list:
        return [self.n_params, repr(self.r_tilde), repr(self.location_error),
                repr(self.lambda_min), repr(self.lambda_max), self.N,
                "" if self.seed is None else self.seed]


def _check(W: WeightMatrix, data: SampleSet):
    if data.d != W.d:
        raise ValueError(f"data dimension {data.d} does not match weights d={W.d}")


def residuals(W: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Hidden activations R = relu(XW) and residual f - y."""
    R = np.maximum(X @ W, 0.0)
    res = R.sum(axis=1)
    res /= W.shape[1]
    res -= y
    return R, res


def risk_and_grad(W: np.ndarray, X: np.ndarray, y: np.ndarray, M: np.ndarray, XT: Optional[np.ndarray] = None):
    """Array-level risk and masked gradient; M may be bool or 0/1 floats.

    ``XT`` (a C-contiguous copy of X.T) switches to a K x N layout, which is
    markedly faster for the narrow products of the training loop.
    """
    N, K = X.shape[0], W.shape[1]
    if XT is None:
        R, res = residuals(W, X, y)
        # sign(relu(z)) is the activity indicator 1{z > 0}
        D = np.sign(R)
        D *= res[:, None]
        G = X.T @ D
    else:
        R = np.ascontiguousarray(W.T) @ XT
        np.maximum(R, 0.0, out=R)
        res = R.sum(axis=0)
        res /= K
        res -= y
        D = np.sign(R)
        D *= res
        G = (D @ X).T
    G *= 1.0 / (N * K)
    return 0.5 * float(res @ res) / N, G * M


def empirical_risk(W: WeightMatrix, data: SampleSet) -> float:
    """(1/2N) sum_n (g(x_n; W) - y_n)^2."""
    _check(W, data)
    _, res = residuals(W.entries, data.inputs, data.labels)
    return 0.5 * float(res @ res) / data.N


def masked_gradient(W: WeightMatrix, data: SampleSet) -> WeightMatrix:
    """M ⊙ grad of the empirical risk; the ReLU derivative at 0 is taken as 0."""
    _check(W, data)
    _, G = risk_and_grad(W.entries, data.inputs, data.labels, W.mask.entries)
    return WeightMatrix(G, W.mask)


def free_coordinates(W: WeightMatrix):
    """(row, col) index arrays of the free coordinates, neuron-major order."""
    cols, rows = np.nonzero(W.mask.entries.T)
    return rows, cols


def _jacobian(W: WeightMatrix, data: SampleSet) -> np.ndarray:
    X = data.inputs
    A = (X @ W.entries) > 0
    rows, cols = free_coordinates(W)
    return A[:, cols] * X[:, rows] / W.K


def hessian(W: WeightMatrix, data: SampleSet, max_params: int = DENSE_CAP) -> np.ndarray:
    """Dense Hessian over the free coordinates (ordering of :func:`free_coordinates`)."""
    _check(W, data)
    P = W.mask.n_params
    if P > max_params:
        raise ValueError(
            f"{P} free coordinates exceed the densification cap of {max_params}; "
            "use hessian_probe(method='lanczos') for a matrix-free eigenvalue probe"
        )
    G = _jacobian(W, data)
    H = G.T @ G / data.N
    return 0.5 * (H + H.T)


def hvp(W: WeightMatrix, data: SampleSet, V) -> np.ndarray:
    """Gauss-Newton Hessian-vector product H V as a masked d x K array."""
    _check(W, data)
    X = data.inputs
    K = W.K
    M = W.mask.entries
    Vm = np.where(M, np.asarray(V, dtype=float), 0.0)
    A = (X @ W.entries) > 0
    u = np.where(A, X @ Vm, 0.0).sum(axis=1) / K
    out = X.T @ (A * u[:, None]) / (data.N * K)
    return np.where(M, out, 0.0)


def _lanczos_extremes(W: WeightMatrix, data: SampleSet, tol: float = 1e-8):
    rows, cols = free_coordinates(W)
    P = rows.size
    shape = W.mask.entries.shape

    def matvec(v):
        V = np.zeros(shape)
        V[rows, cols] = np.ravel(v)
        return hvp(W, data, V)[rows, cols]

    op = LinearOperator((P, P), matvec=matvec, dtype=float)
    if P == 1:
        val = float(matvec(np.ones(1))[0])
        return val, val
    maxiter = 10 * P
    hi = eigsh(op, k=1, which="LA", tol=tol, maxiter=maxiter, return_eigenvectors=False)[0]
    # Shifted operator turns the smallest eigenvalue into the dominant one.
    shift = LinearOperator((P, P), matvec=lambda v: hi * np.ravel(v) - matvec(v), dtype=float)
    top = eigsh(shift, k=1, which="LA", tol=tol, maxiter=maxiter, return_eigenvectors=False)[0]
    return float(hi - top), float(hi)


def hessian_probe(
    W: WeightMatrix,
    data: SampleSet,
    W_star: WeightMatrix,
    method: str = "auto",
    max_params: int = DENSE_CAP,
    seed: Optional[int] = None,
) -> HessianProbe:
    """Extreme Hessian eigenvalues at ``W`` plus its aligned distance from ``W*``.

    ``method`` is ``"dense"`` (symmetric eigensolve), ``"lanczos"``
    (matrix-free) or ``"auto"`` (dense up to ``max_params``).
    """
    P = W.mask.n_params
    if method == "auto":
        method = "dense" if P <= max_params else "lanczos"
    if method == "dense":
        ev = np.linalg.eigvalsh(hessian(W, data, max_params))
        lo, hi = float(ev[0]), float(ev[-1])
    elif method == "lanczos":
        _check(W, data)
        lo, hi = _lanczos_extremes(W, data)
    else:
        raise ValueError(f"unknown method {method!r}")
    loc = align_permutation(W, W_star).relative_error
    return HessianProbe(min(lo, hi), hi, P, loc, r_tilde(W.mask), data.N, seed)
