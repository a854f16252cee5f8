import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kmpforce.errors import DataError, NumericalError
from kmpforce.gmm import ReferenceDatabase
from kmpforce.kmp import (
    KernelParams, KMPModel, ViaPoint, gaussian_kl, insert_via_point, kernel_matrix, kl_diagnostic,
    kmp_predict_covariance, kmp_predict_mean, rbf_kernel, train_kmp,
)


def single(mean=6.0, var=1.0, s=0.5):
    return ReferenceDatabase([[s]], [[mean]], [[[var]]])


def smooth_reference(n=40, seed=0):
    rng = np.random.default_rng(seed)
    s = np.linspace(0, 1, n)
    return ReferenceDatabase(s[:, None], (6 + 4 * np.sin(3 * s))[:, None],
                             rng.uniform(0.1, 0.9, n)[:, None, None])


def test_rbf_hand_values():
    assert rbf_kernel([0.3], [0.3], 7.0) == 1.0
    assert rbf_kernel([0.0], [1.0], 1.0) == pytest.approx(math.exp(-1), abs=1e-15)
    assert rbf_kernel([0.0, 0.0], [1.0, 1.0], 0.5) == pytest.approx(math.exp(-1), abs=1e-15)
    with pytest.raises(ValueError):
        rbf_kernel([0.0], [0.0, 1.0], 1.0)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.01, 100))
def test_rbf_symmetric_and_bounded(a, b, sigma):
    k = rbf_kernel([a], [b], sigma)
    assert k == rbf_kernel([b], [a], sigma)
    assert 0.0 <= k <= 1.0


def test_kernel_matrix_matches_scalar_kernel(rng):
    a, b = rng.uniform(size=(4, 2)), rng.uniform(size=(3, 2))
    K = kernel_matrix(a, b, 3.0)
    for i in range(4):
        for j in range(3):
            assert K[i, j] == pytest.approx(rbf_kernel(a[i], b[j], 3.0), rel=1e-12)


def test_scalar_system_and_mean():
    model = train_kmp(single(), KernelParams(sigma_f=50, lam=1.0, lam_c=1.0))
    assert model.system_matrix(1.0)[0, 0] == 2.0
    assert kmp_predict_mean(model, [0.5])[0] == pytest.approx(3.0, abs=1e-9)
    assert kmp_predict_covariance(model, [0.5])[0, 0] == pytest.approx(0.5, abs=1e-9)


def test_interpolation_limit():
    model = train_kmp(single(), KernelParams(lam=1e-9, lam_c=1.0))
    assert kmp_predict_mean(model, [0.5])[0] == pytest.approx(6.0, abs=1e-6)


def test_far_query():
    model = train_kmp(smooth_reference(), KernelParams(sigma_f=50, lam=0.1, lam_c=2.0))
    far = [[3.0]]  # 50 * 2^2 > 40
    assert abs(model.predict_mean(far)[0, 0]) < 1e-12
    assert model.predict_covariance(far)[0, 0, 0] == pytest.approx(40 / 2.0, rel=1e-12)


def test_large_lambda_shrinks_toward_zero():
    ref = smooth_reference()
    small = np.abs(train_kmp(ref, KernelParams(lam=0.1)).predict_mean(ref.inputs)).max()
    large = np.abs(train_kmp(ref, KernelParams(lam=1e8)).predict_mean(ref.inputs)).max()
    assert large < 1e-3 * small


def test_duplicate_inputs_train():
    ref = ReferenceDatabase([[0.5], [0.5]], [[4.0], [8.0]], [[[1.0]], [[1.0]]])
    model = train_kmp(ref, KernelParams(lam=0.5))
    m = kmp_predict_mean(model, [0.5])[0]
    assert np.isfinite(m) and 4.0 < m < 8.0


def test_factorization_failure_is_reported():
    ref = ReferenceDatabase([[0.5], [0.5]], [[1.0], [1.0]], [[[-1e-9]], [[-1e-9]]])
    with pytest.raises(NumericalError, match="condition"):
        train_kmp(ref, KernelParams(lam=1.0, lam_c=1.0))


def test_reference_consistency_when_well_conditioned():
    # kernel width far below the grid spacing keeps the Gram matrix near identity
    ref = smooth_reference(20)
    model = train_kmp(ref, KernelParams(sigma_f=1e5, lam=1e-6, lam_c=1e-6))
    pred = model.predict_mean(ref.inputs)
    assert np.all(np.abs(pred - ref.means) <= 1e-6 * np.abs(ref.means))


def test_small_lambda_tracks_reference_closely():
    ref = smooth_reference(40)
    model = train_kmp(ref, KernelParams(sigma_f=50, lam=1e-6, lam_c=1e-6))
    assert np.max(np.abs(model.predict_mean(ref.inputs) - ref.means) / np.abs(ref.means)) < 1e-3


def test_permutation_invariance(rng):
    ref = smooth_reference(30)
    perm = rng.permutation(30)
    shuffled = ReferenceDatabase(ref.inputs[perm], ref.means[perm], ref.covariances[perm])
    q = rng.uniform(size=(25, 1))
    a, b = train_kmp(ref), train_kmp(shuffled)
    assert np.allclose(a.predict_mean(q), b.predict_mean(q), atol=1e-12, rtol=0)
    assert np.allclose(a.predict_covariance(q), b.predict_covariance(q), atol=1e-12, rtol=0)


@given(st.floats(-0.5, 1.5))
def test_covariance_psd_everywhere(s):
    model = train_kmp(smooth_reference(25))
    c = model.predict_covariance([[s]])[0]
    assert np.allclose(c, c.T) and np.linalg.eigvalsh(c).min() >= -1e-9


def test_covariance_shrinks_with_lambda_c():
    ref = smooth_reference(25)
    values = [train_kmp(ref, KernelParams(lam_c=lc)).predict_covariance(ref.inputs)[:, 0, 0]
              for lc in (100.0, 10.0, 1.0)]
    # the N / lambda_c prefactor is divided out to compare the Schur complements
    schur = [v * lc / 25 for v, lc in zip(values, (100.0, 10.0, 1.0))]
    assert np.all(schur[0] > schur[1]) and np.all(schur[1] > schur[2])


def test_multi_output_shapes():
    n = 10
    s = np.linspace(0, 1, n)[:, None]
    means = np.column_stack([np.sin(s[:, 0]), np.cos(s[:, 0])])
    covs = np.tile(np.array([[0.5, 0.1], [0.1, 0.3]]), (n, 1, 1))
    model = train_kmp(ReferenceDatabase(s, means, covs))
    assert model.gram.shape == (20, 20)
    assert model.predict_mean([[0.3], [0.6]]).shape == (2, 2)
    assert model.predict_covariance([[0.3]]).shape == (1, 2, 2)


def test_via_point_replace_and_append():
    ref = smooth_reference(11)
    same = insert_via_point(ref, ViaPoint([0.5], [20.0], [[1e-8]]), 5e-4)
    assert len(same) == 11 and same.means[5, 0] == 20.0
    near = insert_via_point(ref, ViaPoint([0.5 + 4e-4], [20.0], [[1e-8]]), 5e-4)
    assert len(near) == 11 and near.inputs[5, 0] == pytest.approx(0.5004)
    far = insert_via_point(ref, ViaPoint([0.55 + 0.005], [20.0], [[1e-8]]), 5e-4)
    assert len(far) == 12 and far.strictly_increasing()
    with pytest.raises(ValueError):
        insert_via_point(ref, ViaPoint([0.5, 0.1], [20.0], [[1e-8]]))


def test_via_point_is_honoured_after_retraining():
    ref = smooth_reference(100)
    vp = ViaPoint([0.437], [20.0], [[1e-8]])
    model = train_kmp(insert_via_point(ref, vp), KernelParams(lam=1e-6, lam_c=1e-6))
    assert abs(kmp_predict_mean(model, [0.437])[0] - 20.0) < 1e-3


def test_via_point_dominance_is_monotone():
    ref = smooth_reference(50)
    errors = []
    for var in (1.0, 1e-1, 1e-2, 1e-4):
        model = train_kmp(insert_via_point(ref, ViaPoint([0.5], [20.0], [[var]])))
        errors.append(abs(kmp_predict_mean(model, [0.5])[0] - 20.0))
    assert all(a > b for a, b in zip(errors, errors[1:]))


def test_via_point_parsing():
    vp = ViaPoint.parse("0.5:20:1e-6")
    assert vp.input.tolist() == [0.5] and vp.mean.tolist() == [20.0] and vp.covariance[0, 0] == 1e-6
    for bad in ("0.5:20", "a:b:c"):
        with pytest.raises(ValueError):
            ViaPoint.parse(bad)
    with pytest.raises(ValueError):
        ViaPoint([0.5], [1.0], [[-1.0]])


def test_kernel_params_validation():
    for kwargs in (dict(sigma_f=0), dict(lam=-1), dict(lam_c=float("nan"))):
        with pytest.raises(ValueError):
            KernelParams(**kwargs)


def test_gaussian_kl_values(rng):
    assert gaussian_kl([0.0], [[1.0]], [0.0], [[1.0]]) == 0.0
    assert gaussian_kl([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(0.5, abs=1e-12)
    # closed form for 1-D variances
    assert gaussian_kl([0.0], [[2.0]], [0.0], [[1.0]]) == pytest.approx(0.5 * (2 - 1 - math.log(2)))
    for _ in range(50):
        a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        ca, cb = a @ a.T + 0.1 * np.eye(3), b @ b.T + 0.1 * np.eye(3)
        assert gaussian_kl(rng.normal(size=3), ca, rng.normal(size=3), cb) >= 0
    with pytest.raises(ValueError):
        gaussian_kl([0.0], [[0.0]], [0.0], [[1.0]])


def test_diagnostics_and_persistence(tmp_path):
    model = train_kmp(smooth_reference(20), KernelParams(sigma_f=40), {"training_ids": ["a", "b"]})
    assert model.condition_number() >= 1
    kl = kl_diagnostic(model)
    assert kl is not None and kl >= 0
    model.save(tmp_path / "kmp.json")
    back = KMPModel.load(tmp_path / "kmp.json")
    q = np.linspace(0, 1, 7)[:, None]
    assert np.array_equal(back.predict_mean(q), model.predict_mean(q))
    assert back.metadata == {"training_ids": ["a", "b"]}
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(DataError):
        KMPModel.load(tmp_path / "bad.json")


def test_joint_prediction_matches_separate_queries(rng):
    model = train_kmp(smooth_reference(30))
    q = rng.uniform(-0.2, 1.2, size=(9, 1))
    mean, cov = model.predict(q)
    assert np.array_equal(mean, model.predict_mean(q))
    assert np.allclose(cov, model.predict_covariance(q), rtol=0, atol=1e-13)
    # explicit Schur complement oracle
    K = kernel_matrix(model.reference.inputs, model.reference.inputs, model.params.sigma_f)
    A = K + model.params.lam_c * np.diag(model.reference.covariances[:, 0, 0])
    k = kernel_matrix(q, model.reference.inputs, model.params.sigma_f)
    expected = 30 / model.params.lam_c * (1 - np.sum(k * np.linalg.solve(A, k.T).T, axis=1))
    assert np.allclose(cov[:, 0, 0], expected, rtol=1e-9, atol=1e-9)
