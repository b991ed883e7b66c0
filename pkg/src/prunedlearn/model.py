"""Pruned one-hidden-layer ReLU networks: masks, weights, oracles and data.

All arrays use the ``d x K`` layout: rows are input features, columns are
hidden neurons. Every value type is immutable after construction.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

Seed = Union[int, np.random.SeedSequence, None]

OVERLAP_MODES = ("almost_overlapped", "disjoint", "random")
ORACLE_FORMAT = "prunedlearn.oracle/v1"
SAMPLES_FORMAT = "prunedlearn.samples/v1"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def make_rng(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class MaskMatrix:
    """Binary d x K connectivity pattern of the hidden layer."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"mask must be a non-empty 2-D array, got shape {a.shape}")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("mask entries must be 0 or 1")
        a = a.astype(bool)
        empty = np.flatnonzero(~a.any(axis=0))
        if empty.size:
            raise ValueError(f"neurons {empty.tolist()} have no connections (r_j must be >= 1)")
        object.__setattr__(self, "entries", _frozen(a))

    @classmethod
    def full(cls, d: int, K: int) -> "MaskMatrix":
        return cls(np.ones((d, K), dtype=bool))

    @classmethod
    def from_supports(cls, d: int, supports: Sequence[Sequence[int]]) -> "MaskMatrix":
        a = np.zeros((d, len(supports)), dtype=bool)
        for j, s in enumerate(supports):
            a[list(s), j] = True
        return cls(a)

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    @property
    def K(self) -> int:
        return self.entries.shape[1]

    @property
    def r(self) -> np.ndarray:
        """Per-neuron connection counts r_j."""
        return self.entries.sum(axis=0)

    @property
    def r_min(self) -> int:
        return int(self.r.min())

    @property
    def r_max(self) -> int:
        return int(self.r.max())

    @property
    def r_ave(self) -> float:
        return float(self.r.mean())

    @property
    def n_params(self) -> int:
        return int(self.entries.sum())

    def support(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.entries[:, j])

    def as_float(self) -> np.ndarray:
        return self.entries.astype(float)

    def permute(self, perm: Sequence[int]) -> "MaskMatrix":
        return MaskMatrix(self.entries[:, list(perm)])

    def __eq__(self, other):
        if not isinstance(other, MaskMatrix):
            return NotImplemented
        return self.entries.shape == other.entries.shape and bool(np.all(self.entries == other.entries))

    def __hash__(self):
        return hash((self.entries.shape, self.entries.tobytes()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"neuron_{j}" for j in range(self.K)])
        for row in self.entries.astype(int):
            w.writerow(row.tolist())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MaskMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        return cls(np.array([[int(v) for v in row] for row in rows[1:]]))


@dataclass(frozen=True)
class WeightMatrix:
    """Real d x K hidden-layer weights constrained to ``mask``'s support."""

    entries: np.ndarray
    mask: MaskMatrix

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=float)
        if a.shape != self.mask.entries.shape:
            raise ValueError(f"weights shape {a.shape} does not match mask shape {self.mask.entries.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("weights must be finite")
        if np.any(a[~self.mask.entries] != 0):
            raise ValueError("weights have nonzero entries outside the mask support")
        object.__setattr__(self, "entries", _frozen(a))

    @classmethod
    def project(cls, entries: np.ndarray, mask: MaskMatrix) -> "WeightMatrix":
        """Zero out everything off the mask, then wrap."""
        return cls(np.where(mask.entries, entries, 0.0), mask)

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    @property
    def K(self) -> int:
        return self.entries.shape[1]

    def permute(self, perm: Sequence[int]) -> "WeightMatrix":
        perm = list(perm)
        return WeightMatrix(self.entries[:, perm], self.mask.permute(perm))

    def norm(self) -> float:
        return float(np.linalg.norm(self.entries))

    def __eq__(self, other):
        if not isinstance(other, WeightMatrix):
            return NotImplemented
        return self.mask == other.mask and bool(np.array_equal(self.entries, other.entries))

    def __hash__(self):
        return hash((self.mask, self.entries.tobytes()))


@dataclass(frozen=True)
class OracleNetwork:
    """Ground-truth pruned network plus its additive Gaussian label noise."""

    weights: WeightMatrix
    noise_sigma: float = 0.0
    overlap_mode: str = "random"
    seed: Optional[int] = None

    def __post_init__(self):
        if not (self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)):
            raise ValueError(f"noise_sigma must be finite and >= 0, got {self.noise_sigma}")

    @property
    def mask(self) -> MaskMatrix:
        return self.weights.mask

    @property
    def d(self) -> int:
        return self.weights.d

    @property
    def K(self) -> int:
        return self.weights.K

    def with_noise(self, noise_sigma: float) -> "OracleNetwork":
        return OracleNetwork(self.weights, float(noise_sigma), self.overlap_mode, self.seed)

    def to_json_dict(self) -> dict:
        return {
            "format": ORACLE_FORMAT,
            "d": self.d,
            "K": self.K,
            "sparsities": self.mask.r.tolist(),
            "overlap_mode": self.overlap_mode,
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "mask": self.mask.entries.astype(int).ravel().tolist(),
            "weights": self.weights.entries.ravel().tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "OracleNetwork":
        if doc.get("format") != ORACLE_FORMAT:
            raise ValueError(f"not an oracle document (format={doc.get('format')!r})")
        shape = (doc["d"], doc["K"])
        mask = MaskMatrix(np.array(doc["mask"], dtype=int).reshape(shape))
        weights = WeightMatrix(np.array(doc["weights"], dtype=float).reshape(shape), mask)
        return cls(weights, float(doc["noise_sigma"]), doc.get("overlap_mode", "random"), doc.get("seed"))


@dataclass(frozen=True)
class SampleSet:
    inputs: np.ndarray
    labels: np.ndarray
    seed: Optional[int] = field(default=None, compare=False)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if x.ndim != 2 or y.ndim != 1:
            raise ValueError("inputs must be (N, d) and labels (N,)")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
        if x.shape[0] < 1:
            raise ValueError("sample set is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "inputs", _frozen(x))
        object.__setattr__(self, "labels", _frozen(y))

    def __eq__(self, other):
        if not isinstance(other, SampleSet):
            return NotImplemented
        return bool(np.array_equal(self.inputs, other.inputs) and np.array_equal(self.labels, other.labels))

    def __hash__(self):
        return hash((self.inputs.tobytes(), self.labels.tobytes()))

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "SampleSet":
        return SampleSet(self.inputs[index], self.labels[index], self.seed)

    def to_json_dict(self) -> dict:
        return {
            "format": SAMPLES_FORMAT,
            "N": self.N,
            "d": self.d,
            "seed": self.seed,
            "inputs": self.inputs.ravel().tolist(),
            "labels": self.labels.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SampleSet":
        if doc.get("format") != SAMPLES_FORMAT:
            raise ValueError(f"not a sample-set document (format={doc.get('format')!r})")
        x = np.array(doc["inputs"], dtype=float).reshape(doc["N"], doc["d"])
        return cls(x, np.array(doc["labels"], dtype=float), doc.get("seed"))


@dataclass(frozen=True)
class AlignmentResult:
    permutation: tuple
    relative_error: float


def _seed_int(seed: Seed) -> Optional[int]:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.generate_state(1, np.uint64)[0] >> 1)
    return None


def overlap_indicator(mask: MaskMatrix) -> np.ndarray:
    """K x K matrix of delta_{j,k}: 1 where neurons j and k share an input."""
    m = mask.entries.astype(np.int64)
    return (m.T @ m) > 0


def generate_oracle(
    d: int,
    K: int,
    sparsities: Sequence[int],
    overlap_mode: str = "almost_overlapped",
    seed: Seed = 0,
    noise_sigma: float = 0.0,
    weight_scale: float = 0.5,
    slack: Optional[int] = None,
    max_retries: int = 200,
) -> OracleNetwork:
    """Draw a random pruned oracle network.

    Nonzero weights are i.i.d. uniform on ``[-weight_scale, weight_scale]``.
    In ``almost_overlapped`` mode every column's support is drawn from a
    shared pool of ``max(r) + slack`` indices (``slack`` defaults to
    ``2 * max(r)``), redrawn until more than 95% of neuron pairs overlap.
    """
    r = np.asarray(sparsities, dtype=int)
    if d < 1 or K < 1:
        raise ValueError("d and K must be positive")
    if r.shape != (K,):
        raise ValueError(f"need exactly K={K} sparsities, got {r.size}")
    if np.any(r < 1) or np.any(r > d):
        raise ValueError(f"every sparsity r_j* must lie in [1, d={d}]")
    if overlap_mode not in OVERLAP_MODES:
        raise ValueError(f"overlap_mode must be one of {OVERLAP_MODES}")
    if overlap_mode == "disjoint" and r.sum() > d:
        raise ValueError(f"disjoint supports need sum(r_j*) = {r.sum()} <= d = {d}")

    rng = make_rng(seed)
    if overlap_mode == "disjoint":
        order = rng.permutation(d)
        bounds = np.concatenate([[0], np.cumsum(r)])
        supports = [order[bounds[j]:bounds[j + 1]] for j in range(K)]
        mask = MaskMatrix.from_supports(d, supports)
    elif overlap_mode == "random":
        mask = MaskMatrix.from_supports(d, [rng.choice(d, r[j], replace=False) for j in range(K)])
    else:
        pool = min(d, int(r.max()) + (2 * int(r.max()) if slack is None else int(slack)))
        for _ in range(max_retries):
            base = rng.choice(d, pool, replace=False)
            mask = MaskMatrix.from_supports(d, [rng.choice(base, r[j], replace=False) for j in range(K)])
            if overlap_indicator(mask).sum() > 0.95 * K * K:
                break
        else:
            raise ValueError(
                f"could not reach sum(delta) > 0.95 K^2 with pool size {pool} after {max_retries} draws"
            )

    w = rng.uniform(-weight_scale, weight_scale, size=(d, K))
    weights = WeightMatrix(np.where(mask.entries, w, 0.0), mask)
    return OracleNetwork(weights, float(noise_sigma), overlap_mode, _seed_int(seed))


def forward_array(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    """(1/K) sum_j relu(X @ w_j) for a batch X of shape (N, d)."""
    Z = X @ W
    return np.maximum(Z, 0.0).sum(axis=1) / W.shape[1]


def forward(weights: WeightMatrix, x) -> Union[float, np.ndarray]:
    """Network output for one input vector (returns a float) or a batch."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != weights.d or x.ndim > 2:
        raise ValueError(f"input dimension {x.shape} does not match d={weights.d}")
    if x.ndim == 1:
        return float(forward_array(weights.entries, x[None, :])[0])
    return forward_array(weights.entries, x)


def sample_dataset(oracle: OracleNetwork, N: int, seed: Seed = 0) -> SampleSet:
    """Draw x ~ N(0, I_d) and y = g(x; W*) + xi with xi ~ N(0, sigma^2)."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    rng = make_rng(seed)
    X = rng.standard_normal((N, oracle.d))
    noise = rng.standard_normal(N)
    y = forward_array(oracle.weights.entries, X)
    if oracle.noise_sigma > 0:
        y = y + oracle.noise_sigma * noise
    return SampleSet(X, y, _seed_int(seed))


def noise_level(oracle: OracleNetwork, reference_samples: SampleSet) -> float:
    """sigma / E_y, where E_y is the RMS of the noiseless outputs."""
    clean = forward_array(oracle.weights.entries, reference_samples.inputs)
    e_y = float(np.sqrt(np.mean(clean ** 2)))
    if e_y == 0:
        raise ValueError("noiseless outputs are all zero; noise level is undefined")
    return oracle.noise_sigma / e_y


def sigma_for_noise_level(oracle: OracleNetwork, level: float, reference_samples: SampleSet) -> float:
    """Inverse of :func:`noise_level` for a given reference set."""
    return level / noise_level(oracle.with_noise(1.0), reference_samples)


def r_tilde(mask: MaskMatrix) -> float:
    """Overlap-weighted effective sparsity of a mask."""
    r = mask.r.astype(np.int64)
    K = mask.K
    weight = 1 + overlap_indicator(mask).astype(np.int64)
    # Collect integer weights per distinct r_j + r_k, then square the sum
    # exactly: sum_a C_a^2 a + 2 sum_{a<b} C_a C_b sqrt(ab). A single
    # distinct sum (K=1, equal sparsities) involves no rounded square root.
    a, inv = np.unique((r[:, None] + r[None, :]).ravel(), return_inverse=True)
    C = np.bincount(inv, weights=weight.ravel()).astype(np.int64)
    square = float(np.sum(C * C * a))
    if a.size > 1:
        i, j = np.triu_indices(a.size, 1)
        square += 2.0 * float(np.sum(C[i] * C[j] * np.sqrt((a[i] * a[j]).astype(float))))
    return square / (8.0 * K ** 4)


def mask_accuracy(learner_mask: MaskMatrix, oracle_mask: MaskMatrix, permute: bool = False) -> float:
    """Fraction of the oracle mask's ones that the learner mask covers.

    With ``permute=True`` the learner's columns are first matched to the
    oracle's to maximize coverage.
    """
    if learner_mask.entries.shape != oracle_mask.entries.shape:
        raise ValueError("masks must have the same shape")
    total = oracle_mask.n_params
    if total == 0:
        raise ValueError("oracle mask is all zero")
    m_star = oracle_mask.entries.astype(np.int64)
    m = learner_mask.entries.astype(np.int64)
    if not permute:
        return float((m_star & m).sum() / total)
    overlap = m_star.T @ m
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return float(overlap[rows, cols].sum() / total)


def pruning_ratio(mask: MaskMatrix) -> float:
    """Percentage of removed connections, (1 - r_ave / d) * 100."""
    return (1.0 - mask.r_ave / mask.d) * 100.0


def align_permutation(W: WeightMatrix, W_star: WeightMatrix) -> AlignmentResult:
    """Column permutation P minimizing ||W - W* P||_F, by exact assignment.

    ``permutation[b] = a`` means learner column ``b`` is matched with oracle
    column ``a``; the relative error is normalized by ``||W*||_F``.
    """
    A = np.asarray(W.entries if isinstance(W, WeightMatrix) else W, dtype=float)
    B = np.asarray(W_star.entries if isinstance(W_star, WeightMatrix) else W_star, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    ref = np.linalg.norm(B)
    if ref == 0:
        raise ValueError("||W*||_F is zero; relative error is undefined")
    perm = _assign(A, B)
    err = np.linalg.norm(A - B[:, perm]) / ref
    return AlignmentResult(tuple(int(p) for p in perm), float(err))


def _assign(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    sq_a = np.einsum("ij,ij->j", A, A)
    sq_b = np.einsum("ij,ij->j", B, B)
    cost = np.maximum(sq_a[:, None] + sq_b[None, :] - 2.0 * (A.T @ B), 0.0)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(A.shape[1], dtype=int)
    perm[rows] = cols
    return perm


def relative_error(W: np.ndarray, W_star: np.ndarray) -> float:
    """Permutation-aligned relative error on raw arrays (hot-path helper)."""
    perm = _assign(W, W_star)
    return float(np.linalg.norm(W - W_star[:, perm]) / np.linalg.norm(W_star))
