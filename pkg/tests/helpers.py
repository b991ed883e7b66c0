"""Independent numerical oracles shared by the test modules."""

import numpy as np

from prunedlearn.model import MaskMatrix, SampleSet, WeightMatrix


def loop_risk(W, X, y):
    """Risk written as plain per-sample loops, no vectorised shortcuts."""
    d, K = W.shape
    total = 0.0
    for n in range(X.shape[0]):
        out = 0.0
        for j in range(K):
            out += max(float(np.dot(W[:, j], X[n])), 0.0)
        total += (out / K - y[n]) ** 2
    return total / (2 * X.shape[0])


def _loss(entries, data):
    X, y = data.inputs, data.labels
    f = np.maximum(X @ entries, 0.0).mean(axis=1)
    return 0.5 * np.mean((f - y) ** 2)


def fd_gradient(W: WeightMatrix, data: SampleSet, h: float = 1e-6) -> np.ndarray:
    """Central differences on every free coordinate; masked ones are zero."""
    E = W.entries.copy()
    out = np.zeros_like(E)
    for i, j in zip(*np.nonzero(W.mask.entries)):
        E[i, j] += h
        up = _loss(E, data)
        E[i, j] -= 2 * h
        down = _loss(E, data)
        E[i, j] += h
        out[i, j] = (up - down) / (2 * h)
    return out


def fd_hessian(W: WeightMatrix, data: SampleSet, h: float = 1e-6) -> np.ndarray:
    """Central differences of an analytic-free gradient, neuron-major order."""
    cols, rows = np.nonzero(W.mask.entries.T)
    X, y = data.inputs, data.labels
    N, K = X.shape[0], W.K

    def grad(E):
        Z = X @ E
        res = np.maximum(Z, 0.0).mean(axis=1) - y
        return (X.T @ ((Z > 0) * res[:, None]) / (N * K))[rows, cols]

    P = rows.size
    H = np.zeros((P, P))
    E = W.entries.copy()
    for p in range(P):
        E[rows[p], cols[p]] += h
        up = grad(E)
        E[rows[p], cols[p]] -= 2 * h
        down = grad(E)
        E[rows[p], cols[p]] += h
        H[:, p] = (up - down) / (2 * h)
    return 0.5 * (H + H.T)


def random_instance(rng, d=6, K=3, N=20, density=0.6, margin=1e-3):
    """Random masked weights and data with no pre-activation within ``margin`` of a kink."""
    while True:
        M = rng.random((d, K)) < density
        M[rng.integers(d, size=K), np.arange(K)] = True
        W = np.where(M, rng.standard_normal((d, K)), 0.0)
        X = rng.standard_normal((N, d))
        if np.min(np.abs(X @ W)) > margin:
            break
    y = rng.standard_normal(N)
    mask = MaskMatrix(M)
    return WeightMatrix(W, mask), SampleSet(X, y), mask
