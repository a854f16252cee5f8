"""Soft-DTW costs, expected alignments and demonstration warping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from kmpforce.demo_data import Demonstration, DemonstrationDatabase
from kmpforce.errors import DataError


@njit(cache=True)
def _softmin3(a, b, c, gamma):
    if gamma == 0.0:
        return min(a, b, c)
    a = -a / gamma
    b = -b / gamma
    c = -c / gamma
    m = max(a, b, c)
    if m == -np.inf:
        return np.inf
    s = np.exp(a - m) + np.exp(b - m) + np.exp(c - m)
    return -gamma * (np.log(s) + m)


@njit(cache=True)
def _forward(D, gamma):
    n, m = D.shape
    R = np.full((n + 2, m + 2), np.inf)
    R[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            R[i, j] = D[i - 1, j - 1] + _softmin3(R[i - 1, j - 1], R[i - 1, j], R[i, j - 1], gamma)
    return R


@njit(cache=True)
def _backward(D, R, gamma):
    n, m = D.shape
    Dp = np.zeros((n + 1, m + 1))
    Dp[:n, :m] = D
    E = np.zeros((n + 2, m + 2))
    R[:, m + 1] = -np.inf
    R[n + 1, :] = -np.inf
    R[n + 1, m + 1] = R[n, m]
    E[n + 1, m + 1] = 1.0
    for j in range(m, 0, -1):
        for i in range(n, 0, -1):
            a = np.exp((R[i + 1, j] - R[i, j] - Dp[i, j - 1]) / gamma)
            b = np.exp((R[i, j + 1] - R[i, j] - Dp[i - 1, j]) / gamma)
            c = np.exp((R[i + 1, j + 1] - R[i, j] - Dp[i, j]) / gamma)
            E[i, j] = E[i + 1, j] * a + E[i, j + 1] * b + E[i + 1, j + 1] * c
    return E[1:n + 1, 1:m + 1]


def _as_sequence(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("sequences must be nonempty arrays of shape (length, dim)")
    return x


def squared_distance_matrix(a, b) -> np.ndarray:
    """Pairwise squared Euclidean distances between the rows of ``a`` and ``b``."""
    a = _as_sequence(a)
    b = _as_sequence(b)
    if a.shape[1] != b.shape[1]:
        raise DataError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def _check_gamma(gamma, strict=False):
    if not np.isfinite(gamma) or gamma < 0:
        raise ValueError(f"gamma must be a finite value >= 0, got {gamma}")
    if strict and gamma == 0:
        raise ValueError("soft alignment needs gamma > 0; use hard DTW path extraction for gamma = 0")


def soft_dtw_from_cost(cost, gamma: float) -> float:
    """Soft-DTW value of a precomputed local cost matrix."""
    _check_gamma(gamma)
    return float(_forward(np.ascontiguousarray(cost, dtype=float), float(gamma))[-2, -2])


def soft_dtw_cost(a, b, gamma: float = 1.0) -> float:
    """Soft-DTW between two sequences with squared Euclidean local cost.

    ``gamma = 0`` gives classic DTW.
    """
    return soft_dtw_from_cost(squared_distance_matrix(a, b), gamma)


def soft_alignment_from_cost(cost, gamma: float) -> np.ndarray:
    """Gradient of :func:`soft_dtw_from_cost` with respect to each cost entry."""
    _check_gamma(gamma, strict=True)
    cost = np.ascontiguousarray(cost, dtype=float)
    R = _forward(cost, float(gamma))
    return _backward(cost, R, float(gamma))


def soft_alignment_matrix(a, b, gamma: float = 1.0) -> np.ndarray:
    """Expected alignment E (len(a) x len(b)), entries in [0, 1]."""
    return soft_alignment_from_cost(squared_distance_matrix(a, b), gamma)


@dataclass
class AlignmentResult:
    reference_index: int
    warped: DemonstrationDatabase
    costs: np.ndarray


def _zscore_channel(db: DemonstrationDatabase) -> list:
    pooled = np.concatenate([d.normal_force() for d in db])
    mean, std = pooled.mean(), pooled.std()
    if std == 0:
        std = 1.0
    return [((d.normal_force() - mean) / std)[:, None] for d in db]


def _medoid(seqs, gamma) -> int:
    h = len(seqs)
    totals = np.zeros(h)
    for i in range(h):
        for j in range(i + 1, h):
            c = soft_dtw_cost(seqs[i], seqs[j], gamma)
            totals[i] += c
            totals[j] += c
    return int(np.argmin(totals))


def warp_onto(reference: Demonstration, demo: Demonstration, weights: np.ndarray) -> Demonstration:
    """Resample ``demo``'s force/torque on ``reference``'s timeline.

    ``weights`` is (len(reference), len(demo)); rows are normalized to convex
    combinations. Time, pose and progress come from the reference.
    """
    w = weights / weights.sum(axis=1, keepdims=True)
    return Demonstration(reference.t, reference.position, reference.orientation,
                         w @ demo.force, w @ demo.torque,
                         reference.scan_length, demo.scenario, demo.demo_id)


def _copy_timeline(reference: Demonstration, demo: Demonstration) -> Demonstration:
    return Demonstration(reference.t, reference.position, reference.orientation,
                         demo.force.copy(), demo.torque.copy(),
                         reference.scan_length, demo.scenario, demo.demo_id)


def align_database(db: DemonstrationDatabase, gamma: float = 1.0, reference="medoid") -> AlignmentResult:
    """Warp every demonstration onto a reference demonstration's timeline.

    Alignment runs on the z-scored normal-force channel. ``reference`` is
    ``"medoid"`` (least summed Soft-DTW cost to the others) or an index.
    A database already aligned to the chosen reference is returned as is, and
    a demonstration whose force channel equals the reference's is copied
    rather than soft-warped.
    """
    if db is None or len(db) == 0:
        raise DataError("cannot align an empty database")
    _check_gamma(gamma, strict=True)
    h = len(db)
    seqs = _zscore_channel(db)

    ids = db.ids
    if reference == "medoid":
        ref = ids.index(db.aligned_to) if db.aligned_to in ids else (_medoid(seqs, gamma) if h > 1 else 0)
    else:
        ref = int(reference)
        if not 0 <= ref < h:
            raise DataError(f"reference index {ref} out of range for {h} demonstrations")

    if h == 1 or (db.aligned_to == ids[ref] and db.is_aligned()):
        costs = np.array([soft_dtw_cost(seqs[ref], s, gamma) for s in seqs])
        return AlignmentResult(ref, db, costs)

    ref_demo = db[ref]
    warped, costs = [], np.zeros(h)
    for k, (demo, seq) in enumerate(zip(db, seqs)):
        cost = squared_distance_matrix(seqs[ref], seq)
        costs[k] = soft_dtw_from_cost(cost, gamma)
        if k == ref:
            warped.append(demo)
        elif len(demo) == len(ref_demo) and np.array_equal(demo.normal_force(), ref_demo.normal_force()):
            warped.append(_copy_timeline(ref_demo, demo))
        else:
            warped.append(warp_onto(ref_demo, demo, soft_alignment_from_cost(cost, gamma)))
    out = DemonstrationDatabase(warped, db.input_dim, db.output_dim, aligned_to=ids[ref])
    return AlignmentResult(ref, out, costs)
