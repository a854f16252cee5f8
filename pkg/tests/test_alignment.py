import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from kmpforce.alignment import (
    align_database, soft_alignment_from_cost, soft_alignment_matrix, soft_dtw_cost, soft_dtw_from_cost,
    squared_distance_matrix, warp_onto,
)
from kmpforce.demo_data import DemonstrationDatabase, subsample, synthesize_demonstrations
from kmpforce.errors import DataError


def brute_force_dtw(cost):
    """Minimum over every monotone path from (0, 0) to (n-1, m-1) by explicit enumeration."""
    n, m = cost.shape
    best = np.inf

    def walk(i, j, acc):
        nonlocal best
        acc += cost[i, j]
        if (i, j) == (n - 1, m - 1):
            best = min(best, acc)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best


def brute_force_soft(cost, gamma):
    """-gamma * log(sum over paths of exp(-path cost / gamma))."""
    n, m = cost.shape
    totals = []

    def walk(i, j, acc):
        acc += cost[i, j]
        if (i, j) == (n - 1, m - 1):
            totals.append(acc)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    t = -np.array(totals) / gamma
    return -gamma * (np.log(np.exp(t - t.max()).sum()) + t.max())


seqs = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 2)),
              elements=st.floats(-5, 5, allow_nan=False))


def test_single_cell():
    assert soft_dtw_cost([[1.0, 2.0]], [[4.0, 6.0]], 1.0) == pytest.approx(25.0)
    assert soft_dtw_cost([[1.0, 2.0]], [[4.0, 6.0]], 0.0) == 25.0


def test_identical_hard_is_zero(rng):
    a = rng.normal(size=(7, 2))
    assert soft_dtw_cost(a, a, 0.0) == 0.0


def test_hard_matches_enumeration(rng):
    for _ in range(200):
        n, m = rng.integers(1, 7, size=2)
        a, b = rng.normal(size=(n, 1)), rng.normal(size=(m, 1))
        cost = squared_distance_matrix(a, b)
        assert soft_dtw_cost(a, b, 0.0) == pytest.approx(brute_force_dtw(cost), abs=1e-6)


def test_soft_matches_enumeration(rng):
    for gamma in (0.1, 1.0, 5.0):
        a, b = rng.normal(size=(4, 1)), rng.normal(size=(5, 1))
        cost = squared_distance_matrix(a, b)
        assert soft_dtw_from_cost(cost, gamma) == pytest.approx(brute_force_soft(cost, gamma), abs=1e-9)


@given(seqs, seqs, st.floats(0.01, 10))
def test_softmin_below_hard_and_symmetric(a, b, gamma):
    if a.shape[1] != b.shape[1]:
        b = np.resize(b, (b.shape[0], a.shape[1]))
    soft = soft_dtw_cost(a, b, gamma)
    assert soft <= soft_dtw_cost(a, b, 0.0) + 1e-9
    assert soft == pytest.approx(soft_dtw_cost(b, a, gamma), rel=1e-9, abs=1e-9)


def test_gradient_matches_finite_differences(rng):
    h = 1e-6
    for gamma in (0.5, 1.0, 2.0):
        cost = rng.uniform(0, 3, size=(5, 6))
        E = soft_alignment_from_cost(cost, gamma)
        for i in range(5):
            for j in range(6):
                up, dn = cost.copy(), cost.copy()
                up[i, j] += h
                dn[i, j] -= h
                fd = (soft_dtw_from_cost(up, gamma) - soft_dtw_from_cost(dn, gamma)) / (2 * h)
                assert E[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-8)


@given(seqs, seqs, st.floats(0.05, 5))
def test_alignment_entries_and_rows(a, b, gamma):
    b = np.resize(b, (b.shape[0], a.shape[1]))
    E = soft_alignment_matrix(a, b, gamma)
    assert E.shape == (a.shape[0], b.shape[0])
    assert np.all(np.isfinite(E)) and E.min() >= 0 and E.max() <= 1 + 1e-9
    assert np.all(E.sum(axis=1) > 0)
    assert E[0, 0] == pytest.approx(1.0) and E[-1, -1] == pytest.approx(1.0)


def test_self_alignment_limit(rng):
    a = rng.normal(size=(6, 1)) * 3
    E = soft_alignment_matrix(a, a, 1e-3)
    assert np.allclose(E, np.eye(6), atol=1e-6)


def test_gamma_validation():
    with pytest.raises(ValueError):
        soft_alignment_matrix([[0.0]], [[1.0]], 0.0)
    with pytest.raises(ValueError):
        soft_dtw_cost([[0.0]], [[1.0]], -1.0)
    with pytest.raises(DataError):
        soft_dtw_cost(np.zeros((2, 1)), np.zeros((2, 2)))


def test_single_demo_unchanged():
    db = synthesize_demonstrations("constant", 1, seed=1)
    assert align_database(db).warped is db


def test_identical_demos_copy_reference():
    d = synthesize_demonstrations("compression", 1, noise_std=0.3, seed=2)[0]
    twin = type(d)(d.t, d.position, d.orientation, d.force, d.torque, d.scan_length, d.scenario, "twin")
    result = align_database(DemonstrationDatabase([d, twin]))
    for w in result.warped:
        assert np.allclose(w.force, d.force, atol=1e-9)


def _onset_spread(forces, ref):
    idx = int(np.argmax(ref >= 15.0))
    return np.std([f[idx] for f in forces])


def test_alignment_reduces_onset_spread():
    db = subsample(synthesize_demonstrations("compression", 4, noise_std=0.0, seed=21, time_warp=0.1), 4)
    n = min(len(d) for d in db)
    result = align_database(db)
    ref = result.warped[result.reference_index].normal_force()
    before = _onset_spread([d.normal_force()[:n] for d in db], ref[:n])
    after = _onset_spread([d.normal_force() for d in result.warped], ref)
    assert len({len(d) for d in result.warped}) == 1
    assert after < 0.05 * before


def test_alignment_idempotent_and_self_cost():
    db = subsample(synthesize_demonstrations("bimodal", 3, noise_std=0.2, seed=4), 8)
    first = align_database(db)
    second = align_database(first.warped)
    assert second.reference_index == first.reference_index
    for a, b in zip(first.warped, second.warped):
        assert np.allclose(a.force, b.force, atol=1e-9)
    assert second.costs[second.reference_index] <= 0


def test_explicit_reference_index():
    db = subsample(synthesize_demonstrations("constant", 3, noise_std=0.2, seed=4), 10)
    result = align_database(db, reference=2)
    assert result.reference_index == 2
    assert result.warped.aligned_to == db.ids[2]
    assert all(len(w) == len(db[2]) for w in result.warped)
    with pytest.raises(DataError):
        align_database(db, reference=5)


def test_warp_weights_are_convex():
    db = synthesize_demonstrations("constant", 2, noise_std=0.0, seed=0)
    w = np.ones((len(db[0]), len(db[1])))
    out = warp_onto(db[0], db[1], w)
    assert np.allclose(out.normal_force(), 6.0)
