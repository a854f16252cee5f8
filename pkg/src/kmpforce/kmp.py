"""Kernelized movement primitives: training, prediction and via-points.

The model imitates a reference database {s_n, mu_n, Sigma_n} with

    mean(s*) = k* (K + lambda Sigma)^-1 mu
    cov(s*)  = N / lambda_c * (k(s*, s*) - k* (K + lambda_c Sigma)^-1 k*^T)

where K is the block Gram matrix ``k(s_i, s_j) I_O`` and Sigma the block
diagonal of the reference covariances. No basis functions are materialized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

from kmpforce.errors import DataError, NumericalError
from kmpforce.gmm import ReferenceDatabase

SCHEMA_VERSION = 1
JITTER = 1e-10
PSD_TOL = 1e-9


@dataclass(frozen=True)
class KernelParams:
    sigma_f: float = 50.0
    lam: float = 0.1
    lam_c: float = 10.0

    def __post_init__(self):
        for name in ("sigma_f", "lam", "lam_c"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be strictly positive, got {v}")

    def to_dict(self) -> dict:
        return {"sigma_f": self.sigma_f, "lambda": self.lam, "lambda_c": self.lam_c}

    @classmethod
    def from_dict(cls, doc: dict) -> "KernelParams":
        return cls(float(doc["sigma_f"]), float(doc["lambda"]), float(doc["lambda_c"]))


@dataclass(frozen=True)
class ViaPoint:
    input: np.ndarray
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.input, dtype=float))
        mu = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.covariance, dtype=float)
        if cov.ndim < 2:
            cov = np.atleast_1d(cov) * np.eye(mu.shape[0]) if cov.size == 1 else np.diag(cov)
        if cov.shape != (mu.shape[0], mu.shape[0]):
            raise ValueError(f"via-point covariance shape {cov.shape} does not match mean {mu.shape}")
        if not np.allclose(cov, cov.T, atol=1e-15) or np.linalg.eigvalsh(cov).min() < 0:
            raise ValueError("via-point covariance must be symmetric positive semidefinite")
        object.__setattr__(self, "input", s)
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def parse(cls, text: str) -> "ViaPoint":
        """Parse ``progress:force:variance`` (scalar input and output)."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"via-point {text!r} is not progress:force:variance")
        s, mu, var = (float(p) for p in parts)
        return cls([s], [mu], [[var]])


def rbf_kernel(s_i, s_j, sigma_f: float) -> float:
    s_i = np.atleast_1d(np.asarray(s_i, dtype=float))
    s_j = np.atleast_1d(np.asarray(s_j, dtype=float))
    if s_i.shape != s_j.shape:
        raise ValueError(f"input dimensions differ: {s_i.shape} vs {s_j.shape}")
    d = s_i - s_j
    return float(np.exp(-sigma_f * (d @ d)))


def kernel_matrix(a, b, sigma_f: float) -> np.ndarray:
    """RBF kernel between the rows of ``a`` (n, I) and ``b`` (m, I)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-sigma_f * np.maximum(d2, 0.0))


def _factor(matrix, what):
    try:
        return cho_factor(matrix, lower=True, check_finite=True)
    except (LinAlgError, ValueError):
        pass
    try:
        return cho_factor(matrix + JITTER * np.eye(matrix.shape[0]), lower=True)
    except (LinAlgError, ValueError):
        cond = np.linalg.cond(matrix)
        raise NumericalError(
            f"factorization of {what} failed (condition estimate {cond:.3g}); "
            f"increase the regularization") from None


@dataclass
class KMPModel:
    reference: ReferenceDatabase
    params: KernelParams = field(default_factory=KernelParams)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        # factor once; both systems are needed by every covariance query
        self._mean_factor = _factor(self.system_matrix(self.params.lam), "K + lambda*Sigma")
        self._cov_factor = _factor(self.system_matrix(self.params.lam_c), "K + lambda_c*Sigma")
        self._alpha = cho_solve(self._mean_factor, self.stacked_mean)

    @property
    def n_points(self) -> int:
        return len(self.reference)

    @property
    def output_dim(self) -> int:
        return self.reference.output_dim

    @cached_property
    def scalar_gram(self) -> np.ndarray:
        s = self.reference.inputs
        return kernel_matrix(s, s, self.params.sigma_f)

    @property
    def gram(self) -> np.ndarray:
        return np.kron(self.scalar_gram, np.eye(self.output_dim))

    @property
    def block_covariance(self) -> np.ndarray:
        n, o = self.n_points, self.output_dim
        out = np.zeros((n * o, n * o))
        for i, c in enumerate(self.reference.covariances):
            out[i * o:(i + 1) * o, i * o:(i + 1) * o] = c
        return out

    @property
    def stacked_mean(self) -> np.ndarray:
        return self.reference.means.reshape(-1)

    def system_matrix(self, reg: float) -> np.ndarray:
        return self.gram + reg * self.block_covariance

    def condition_number(self) -> float:
        eig = np.linalg.eigvalsh(self.system_matrix(self.params.lam))
        return float(np.abs(eig).max() / np.abs(eig).min())

    def _query_rows(self, s_star) -> np.ndarray:
        s = np.asarray(s_star, dtype=float).reshape(-1, self.reference.input_dim)
        return kernel_matrix(s, self.reference.inputs, self.params.sigma_f)

    def predict_mean(self, s_star) -> np.ndarray:
        """Means at each query row, shape (M, O)."""
        k = self._query_rows(s_star)
        o = self.output_dim
        alpha = self._alpha.reshape(self.n_points, o)
        return k @ alpha

    def _covariance_from_rows(self, k) -> np.ndarray:
        n, o, m = self.n_points, self.output_dim, k.shape[0]
        # v = L^-1 kron(k_q, I); forming the quadratic form from triangular solves avoids the
        # cancellation an explicit inverse suffers when the reference covariances are tiny
        if o == 1:
            v = solve_triangular(self._cov_factor[0], k.T, lower=True, check_finite=False)
            quad = np.einsum("kq,kq->q", v, v).reshape(m, 1, 1)
        else:
            rows = np.einsum("qi,ab->iaqb", k, np.eye(o)).reshape(n * o, m * o)
            v = solve_triangular(self._cov_factor[0], rows, lower=True, check_finite=False).reshape(n * o, m, o)
            quad = np.einsum("kqa,kqb->qab", v, v)
        c = (n / self.params.lam_c) * (np.eye(o) - quad)  # k(s*, s*) = 1 for the RBF kernel
        return _floor_psd(0.5 * (c + c.transpose(0, 2, 1)))

    def predict_covariance(self, s_star) -> np.ndarray:
        """Covariances at each query row, shape (M, O, O)."""
        return self._covariance_from_rows(self._query_rows(s_star))

    def predict(self, s_star):
        """Means (M, O) and covariances (M, O, O) sharing one kernel evaluation."""
        k = self._query_rows(s_star)
        return k @ self._alpha.reshape(self.n_points, self.output_dim), self._covariance_from_rows(k)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "params": self.params.to_dict(),
                "reference": self.reference.to_dict(), "metadata": self.metadata}

    @classmethod
    def from_dict(cls, doc: dict) -> "KMPModel":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported KMP schema_version {doc.get('schema_version')!r}")
        try:
            return cls(ReferenceDatabase.from_dict(doc["reference"]),
                       KernelParams.from_dict(doc["params"]), dict(doc.get("metadata", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed KMP document: {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "KMPModel":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read KMP model {path}: {exc}") from exc


def _floor_psd(c):
    """Clip round-off negatives of a stack of symmetric matrices; fail on real indefiniteness."""
    if c.shape[-1] == 1:
        low = c.min()
        if low >= 0:
            return c
        if low > -PSD_TOL:
            return np.maximum(c, 0.0)
    else:
        w, v = np.linalg.eigh(c)
        low = w.min()
        if low >= 0:
            return c
        if low > -PSD_TOL:
            return np.einsum("qij,qj,qkj->qik", v, np.maximum(w, 0.0), v)
    raise NumericalError(f"predicted covariance is indefinite (min eigenvalue {low:.3g}); "
                         f"increase lambda_c")


def train_kmp(reference: ReferenceDatabase, params: KernelParams = KernelParams(),
              metadata: dict | None = None) -> KMPModel:
    return KMPModel(reference, params, dict(metadata or {}))


def kmp_predict_mean(model: KMPModel, s_star) -> np.ndarray:
    return model.predict_mean(s_star)[0]


def kmp_predict_covariance(model: KMPModel, s_star) -> np.ndarray:
    return model.predict_covariance(s_star)[0]


def insert_via_point(reference: ReferenceDatabase, vp: ViaPoint, r_threshold: float = 5e-4) -> ReferenceDatabase:
    """Replace the nearest reference entry if within ``r_threshold``, else append.

    Appended points are kept sorted by input for scalar inputs. The model
    has to be retrained on the returned database.
    """
    if r_threshold <= 0:
        raise ValueError("r_threshold must be positive")
    if vp.input.shape[0] != reference.input_dim or vp.mean.shape[0] != reference.output_dim:
        raise ValueError("via-point dimensions do not match the reference database")
    dist = np.linalg.norm(reference.inputs - vp.input, axis=1)
    nearest = int(np.argmin(dist))
    inputs = reference.inputs.copy()
    means = reference.means.copy()
    covs = reference.covariances.copy()
    if dist[nearest] <= r_threshold:
        inputs[nearest], means[nearest], covs[nearest] = vp.input, vp.mean, vp.covariance
        return ReferenceDatabase(inputs, means, covs)
    inputs = np.vstack([inputs, vp.input])
    means = np.vstack([means, vp.mean])
    covs = np.concatenate([covs, vp.covariance[None]])
    if reference.input_dim == 1:
        order = np.argsort(inputs[:, 0], kind="stable")
        inputs, means, covs = inputs[order], means[order], covs[order]
    return ReferenceDatabase(inputs, means, covs)


def gaussian_kl(mean_a, cov_a, mean_b, cov_b) -> float:
    """KL(N(mean_a, cov_a) || N(mean_b, cov_b))."""
    mean_a = np.atleast_1d(np.asarray(mean_a, dtype=float))
    mean_b = np.atleast_1d(np.asarray(mean_b, dtype=float))
    k = mean_a.shape[0]
    cov_a = np.asarray(cov_a, dtype=float).reshape(k, k)
    cov_b = np.asarray(cov_b, dtype=float).reshape(k, k)
    try:
        la = np.linalg.cholesky(cov_a)
        lb = np.linalg.cholesky(cov_b)
    except np.linalg.LinAlgError:
        raise ValueError("KL divergence needs symmetric positive definite covariances") from None
    fb = (lb, True)
    diff = mean_b - mean_a
    trace = np.trace(cho_solve(fb, cov_a))
    maha = diff @ cho_solve(fb, diff)
    logdet = 2.0 * (np.log(np.diag(lb)).sum() - np.log(np.diag(la)).sum())
    return float(max(0.5 * (trace + maha - k + logdet), 0.0))


def kl_diagnostic(model: KMPModel):
    """Summed KL(predicted || reference) over the reference inputs, or None if undefined."""
    means = model.predict_mean(model.reference.inputs)
    covs = model.predict_covariance(model.reference.inputs)
    total = 0.0
    try:
        for m, c, rm, rc in zip(means, covs, model.reference.means, model.reference.covariances):
            total += gaussian_kl(m, c, rm, rc)
    except ValueError:
        return None
    return total
