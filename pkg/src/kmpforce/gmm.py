"""Gaussian mixture fitting by EM and Gaussian mixture regression."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from numba import njit
from scipy.special import logsumexp

from kmpforce.errors import DataError, NumericalError

SCHEMA_VERSION = 1
COVARIANCE_FLOOR = 1e-6
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GMMModel:
    """Mixture over joint [s, xi] vectors, parameters in physical units.

    ``means`` is (C, I+O), ``covariances`` (C, I+O, I+O). ``data_mean`` and
    ``data_scale`` are the z-scoring used during the fit; ``log_likelihood``
    holds the per-iteration mean log-likelihood (in z-scored space).
    """

    priors: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    input_dim: int
    output_dim: int
    data_mean: np.ndarray | None = None
    data_scale: np.ndarray | None = None
    log_likelihood: list = field(default_factory=list)
    converged: bool = True

    def __post_init__(self):
        self.priors = np.asarray(self.priors, dtype=float).reshape(-1)
        c = self.priors.shape[0]
        d = self.input_dim + self.output_dim
        self.means = np.asarray(self.means, dtype=float).reshape(c, d)
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(c, d, d)
        if self.data_mean is None:
            self.data_mean = np.zeros(d)
        if self.data_scale is None:
            self.data_scale = np.ones(d)
        self.data_mean = np.asarray(self.data_mean, dtype=float)
        self.data_scale = np.asarray(self.data_scale, dtype=float)
        if abs(self.priors.sum() - 1.0) > 1e-12 or np.any(self.priors <= 0):
            raise DataError("mixture priors must be positive and sum to 1")
        if not np.allclose(self.covariances, self.covariances.transpose(0, 2, 1), rtol=0, atol=1e-12):
            raise DataError("component covariances must be symmetric")

    @property
    def n_components(self) -> int:
        return self.priors.shape[0]

    def _blocks(self):
        i = self.input_dim
        return (self.means[:, :i], self.means[:, i:], self.covariances[:, :i, :i],
                self.covariances[:, i:, :i], self.covariances[:, i:, i:])

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "n_components": self.n_components,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "priors": self.priors.tolist(),
            "means": self.means.tolist(),
            "covariances": [c.reshape(-1).tolist() for c in self.covariances],
            "zscore": {"mean": self.data_mean.tolist(), "scale": self.data_scale.tolist()},
            "log_likelihood": [float(v) for v in self.log_likelihood],
            "converged": bool(self.converged),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GMMModel":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported GMM schema_version {doc.get('schema_version')!r}")
        try:
            return cls(doc["priors"], doc["means"], doc["covariances"], doc["input_dim"],
                       doc["output_dim"], doc["zscore"]["mean"], doc["zscore"]["scale"],
                       list(doc.get("log_likelihood", [])), doc.get("converged", True))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed GMM document: {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GMMModel":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read GMM model {path}: {exc}") from exc


@njit(cache=True)
def _log_weighted_kernel(x, log_priors, means, chol_inv, logdet):
    m, d = x.shape
    c = means.shape[0]
    out = np.empty((m, c))
    diff = np.empty(d)
    const = d * np.log(2.0 * np.pi)
    for k in range(c):
        for n in range(m):
            for i in range(d):
                diff[i] = x[n, i] - means[k, i]
            maha = 0.0
            for i in range(d):
                acc = 0.0
                for j in range(i + 1):
                    acc += chol_inv[k, i, j] * diff[j]
                maha += acc * acc
            out[n, k] = log_priors[k] - 0.5 * (maha + logdet[k] + const)
    return out


@njit(cache=True)
def _normalize_rows(logw):
    """Row-wise log-sum-exp and the normalized weights."""
    m, c = logw.shape
    lognorm = np.empty(m)
    resp = np.empty((m, c))
    for n in range(m):
        top = logw[n, 0]
        for k in range(1, c):
            if logw[n, k] > top:
                top = logw[n, k]
        acc = 0.0
        for k in range(c):
            resp[n, k] = np.exp(logw[n, k] - top)
            acc += resp[n, k]
        for k in range(c):
            resp[n, k] /= acc
        lognorm[n] = top + np.log(acc)
    return lognorm, resp


@njit(cache=True)
def _weighted_scatter(z, resp, means, nk):
    m, d = z.shape
    c = means.shape[0]
    out = np.zeros((c, d, d))
    for k in range(c):
        for n in range(m):
            w = resp[n, k]
            for i in range(d):
                di = z[n, i] - means[k, i]
                for j in range(i + 1):
                    out[k, i, j] += w * di * (z[n, j] - means[k, j])
        for i in range(d):
            for j in range(i + 1):
                out[k, i, j] /= nk[k]
                out[k, j, i] = out[k, i, j]
    return out


def _log_weighted(x, priors, means, covs):
    """log(pi_c N(x | mu_c, Sigma_c)) for every row of x and component, shape (M, C)."""
    try:
        chol = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        raise NumericalError("covariance is not positive definite") from None
    chol_inv = np.linalg.inv(chol)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(1)
    return _log_weighted_kernel(np.ascontiguousarray(x, dtype=float), np.log(priors),
                                np.ascontiguousarray(means, dtype=float), np.ascontiguousarray(chol_inv),
                                logdet)


def _kmeans_pp(x, c, rng):
    m = x.shape[0]
    centers = [int(rng.integers(m))]
    d2 = ((x - x[centers[0]]) ** 2).sum(1)
    for _ in range(1, c):
        total = d2.sum()
        if total <= 0:
            raise DataError("fewer distinct points than mixture components")
        # searchsorted on the cumulative sum: lowest index wins on ties
        k = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        k = min(k, m - 1)
        centers.append(k)
        d2 = np.minimum(d2, ((x - x[k]) ** 2).sum(1))
    return x[centers].copy()


def _clip_eigenvalues(covs, floor):
    # the constrained M-step: over {Sigma >= floor * I} the Gaussian Q-function is maximized by
    # raising the scatter's eigenvalues to the floor, which keeps EM monotone in the likelihood
    w, v = np.linalg.eigh(covs)
    out = (v * np.maximum(w, floor)[:, None, :]) @ v.transpose(0, 2, 1)
    return 0.5 * (out + out.transpose(0, 2, 1))


def _em(z, c, rng, tol, max_iter, floor, check_monotone):
    d = z.shape[1]
    means = _kmeans_pp(z, c, rng)
    priors = np.full(c, 1.0 / c)
    covs = np.repeat(_clip_eigenvalues(np.cov(z, rowvar=False, bias=True).reshape(1, d, d), floor), c, axis=0)
    history = []
    converged = False
    for _ in range(max_iter):
        lognorm, resp = _normalize_rows(_log_weighted(z, priors, means, covs))
        history.append(float(lognorm.mean()))
        if len(history) > 1:
            if check_monotone and history[-1] < history[-2] - 1e-9:
                raise NumericalError(
                    f"EM log-likelihood decreased from {history[-2]!r} to {history[-1]!r}")
            if abs(history[-1] - history[-2]) < tol:
                converged = True
                break
        nk = resp.sum(0) + 10 * np.finfo(float).eps
        priors = nk / nk.sum()
        means = (resp.T @ z) / nk[:, None]
        covs = _clip_eigenvalues(_weighted_scatter(z, resp, means, nk), floor)
    return priors, means, covs, history, converged


def fit_gmm(data, n_components: int = 8, seed: int = 0, tol: float = 1e-6, max_iter: int = 500,
            input_dim: int = 1, reg: float = COVARIANCE_FLOOR, n_init: int = 4,
            check_monotone: bool = True) -> GMMModel:
    """Fit a full-covariance GMM to joint vectors by EM.

    Data are z-scored per dimension (constant dimensions keep scale 1) and
    in that space every covariance eigenvalue below ``reg`` is raised to it.
    Each of the ``n_init`` restarts seeds the means by k-means++, starts from
    uniform priors and the sample covariance, and iterates until the mean
    log-likelihood changes by less than ``tol``; the restart with the highest
    final log-likelihood is kept (earliest on ties).
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise DataError("data must be a 2-D array of joint vectors")
    m, d = x.shape
    c = int(n_components)
    if c < 1:
        raise DataError("n_components must be >= 1")
    if not 1 <= input_dim < d:
        raise DataError(f"input_dim must be in [1, {d - 1}]")
    if m <= c * d:
        raise DataError(f"need more than C*(I+O) = {c * d} points, got {m}")
    if not np.all(np.isfinite(x)):
        raise DataError("data contain non-finite values")
    if np.unique(x, axis=0).shape[0] < c:
        raise DataError("fewer distinct points than mixture components")

    shift = x.mean(0)
    scale = x.std(0)
    scale[scale == 0] = 1.0
    z = (x - shift) / scale
    floor = float(reg)

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        run = _em(z, c, rng, tol, max_iter, floor, check_monotone)
        if best is None or run[3][-1] > best[3][-1]:
            best = run
    priors, means, covs, history, converged = best

    s = np.diag(scale)
    phys_cov = np.einsum("ij,cjk,kl->cil", s, covs, s)
    phys_cov = 0.5 * (phys_cov + phys_cov.transpose(0, 2, 1))
    return GMMModel(priors, shift + means * scale, phys_cov, input_dim, d - input_dim,
                    shift, scale, history, converged)


def bic(model: GMMModel, data) -> float:
    x = np.asarray(data, dtype=float)
    d = x.shape[1]
    c = model.n_components
    loglik = logsumexp(_log_weighted(x, model.priors, model.means, model.covariances), axis=1).sum()
    n_params = (c - 1) + c * d + c * d * (d + 1) / 2
    return float(-2.0 * loglik + n_params * np.log(x.shape[0]))


def select_components_bic(data, candidates=range(2, 13), seed: int = 0, **kwargs) -> GMMModel:
    """Fit one model per candidate component count and keep the lowest BIC."""
    best, best_score = None, np.inf
    for c in candidates:
        model = fit_gmm(data, c, seed, **kwargs)
        score = bic(model, data)
        if score < best_score:
            best, best_score = model, score
    return best


def responsibilities(model: GMMModel, s) -> np.ndarray:
    """Posterior component weights h_c(s) given inputs only, shape (N, C)."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    mu_s, _, cov_ss, _, _ = model._blocks()
    logw = _log_weighted(s, model.priors, mu_s, cov_ss)
    return np.exp(logw - logsumexp(logw, axis=1, keepdims=True))


def gmr(model: GMMModel, inputs):
    """Conditional means (N, O) and covariances (N, O, O) of xi given each input row."""
    s = np.asarray(inputs, dtype=float).reshape(-1, model.input_dim)
    mu_s, mu_x, cov_ss, cov_xs, cov_xx = model._blocks()
    h = responsibilities(model, s)
    n, o = s.shape[0], model.output_dim
    mean = np.zeros((n, o))
    second = np.zeros((n, o, o))
    for c in range(model.n_components):
        try:
            factor = cho_factor(cov_ss[c])
        except LinAlgError:
            raise NumericalError(f"input block of component {c} is singular") from None
        gain = cho_solve(factor, cov_xs[c].T).T  # Sigma_xs Sigma_ss^-1
        mu_c = mu_x[c] + (s - mu_s[c]) @ gain.T
        cond_cov = cov_xx[c] - gain @ cov_xs[c].T
        mean += h[:, c, None] * mu_c
        second += h[:, c, None, None] * (cond_cov[None] + mu_c[:, :, None] * mu_c[:, None, :])
    cov = second - mean[:, :, None] * mean[:, None, :]
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    return mean, cov


def gmr_condition(model: GMMModel, s_hat):
    """GMR mean (O,) and covariance (O, O) at a single input."""
    mean, cov = gmr(model, np.asarray(s_hat, dtype=float).reshape(1, model.input_dim))
    return mean[0], cov[0]


@dataclass
class ReferenceDatabase:
    """N reference inputs with GMR means and covariances (the KMP training target)."""

    inputs: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        n = self.inputs.shape[0]
        self.means = np.asarray(self.means, dtype=float).reshape(n, -1)
        o = self.means.shape[1]
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(n, o, o)
        if n < 1:
            raise DataError("reference database must be nonempty")
        if not np.allclose(self.covariances, self.covariances.transpose(0, 2, 1), rtol=0, atol=1e-12):
            raise DataError("reference covariances must be symmetric")
        min_eig = np.linalg.eigvalsh(self.covariances).min()
        if min_eig < -1e-9:
            raise DataError(f"reference covariance not PSD (min eigenvalue {min_eig:.3g})")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.means.shape[1]

    def strictly_increasing(self) -> bool:
        return self.input_dim != 1 or bool(np.all(np.diff(self.inputs[:, 0]) > 0))

    def to_dict(self) -> dict:
        return {"inputs": self.inputs.tolist(), "means": self.means.tolist(),
                "covariances": [c.reshape(-1).tolist() for c in self.covariances]}

    @classmethod
    def from_dict(cls, doc: dict) -> "ReferenceDatabase":
        return cls(doc["inputs"], doc["means"], doc["covariances"])


def build_reference_database(model: GMMModel, reference_inputs) -> ReferenceDatabase:
    """Query GMR at every reference input (order preserved)."""
    s = np.asarray(reference_inputs, dtype=float).reshape(-1, model.input_dim)
    if s.shape[0] < 1:
        raise DataError("need at least one reference input")
    mean, cov = gmr(model, s)
    return ReferenceDatabase(s, mean, cov)


def uniform_grid(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)[:, None]
