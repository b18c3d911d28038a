"""Gaussian-mixture latent prior: EM fitting and reparameterized sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .nn import make_rng

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class MixturePrior:
    """``K`` Gaussians with weights, means and lower-triangular factors.

    Component ``k`` has covariance ``factors[k] @ factors[k].T``.
    """

    weights: np.ndarray
    means: np.ndarray
    factors: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.factors = np.asarray(self.factors, dtype=np.float64)
        K, p = self.means.shape
        if K < 1:
            raise ValueError("a mixture needs at least one component")
        if self.weights.shape != (K,) or self.factors.shape != (K, p, p):
            raise ValueError("weights/means/factors shapes disagree")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must lie on the simplex")

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def covariances(self):
        return np.einsum("kij,klj->kil", self.factors, self.factors)

    @classmethod
    def standard_normal(cls, dim):
        return cls(np.ones(1), np.zeros((1, dim)), np.eye(dim)[None])

    @classmethod
    def from_covariances(cls, weights, means, covariances):
        return cls(weights, means, np.linalg.cholesky(covariances))

    def log_likelihood(self, x):
        return float(logsumexp(_log_joint(x, self.weights, self.means, self.factors), axis=1).sum())


def sample_prior(prior: MixturePrior, n, rng, eps=None):
    """Draw ``n`` latent vectors as ``A_k @ eps + u_k``.

    Returns ``(z, assignments)``.  ``eps`` may be supplied to pin the standard
    normal noise (shape ``n x p``).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    comp = rng.choice(prior.n_components, size=n, p=prior.weights)
    if eps is None:
        eps = rng.standard_normal((n, prior.dim))
    z = np.einsum("nij,nj->ni", prior.factors[comp], eps) + prior.means[comp]
    return z, comp


def _log_joint(x, weights, means, factors):
    """log(w_k) + log N(x | u_k, A_k A_k^T) for every row and component."""
    n, p = x.shape
    out = np.empty((n, len(weights)))
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    for k in range(len(weights)):
        L = factors[k]
        diff = (x - means[k]).T
        sol = _solve_lower(L, diff)
        maha = (sol * sol).sum(axis=0)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        out[:, k] = logw[k] - 0.5 * (p * LOG_2PI + logdet + maha)
    return out


def _solve_lower(L, b):
    return solve_triangular(L, b, lower=True, check_finite=False)


def kmeans_pp(x, K, rng):
    """k-means++ seeding; returns ``K`` rows of ``x``."""
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


@dataclass
class EMResult:
    prior: MixturePrior
    log_likelihood: float
    history: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    reseeded: int = 0


def _m_step(x, resp, reg):
    n, p = x.shape
    nk = resp.sum(axis=0)
    weights = nk / n
    means = (resp.T @ x) / nk[:, None]
    covs = np.empty((len(nk), p, p))
    for k in range(len(nk)):
        diff = x - means[k]
        covs[k] = (resp[:, k, None] * diff).T @ diff / nk[k]
        covs[k] = 0.5 * (covs[k] + covs[k].T)
        covs[k].flat[:: p + 1] += reg
    return weights, means, covs


def fit_em(points, K, max_iter=200, tol=1e-6, seed=0, reg=1e-6, init=None):
    """Fit a ``K``-component full-covariance mixture by EM.

    ``init`` optionally gives starting ``(weights, means, covariances)``;
    otherwise k-means++ seeds hard assignments.  A component whose
    responsibility mass drops below two points is re-seeded at the worst
    explained point.  Returns an :class:`EMResult` whose ``history`` holds
    the log-likelihood before every M-step, plus the final value.
    """
    x = np.asarray(getattr(points, "data", points), dtype=np.float64)
    n, p = x.shape
    if K < 1:
        raise ValueError("K must be >= 1")
    if n < K:
        raise ValueError(f"need at least K={K} points, got {n}")
    rng = make_rng(seed)
    if init is None:
        centers = kmeans_pp(x, K, rng)
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        resp = np.zeros((n, K))
        resp[np.arange(n), d2.argmin(axis=1)] = 1.0
        resp += 1e-10
        resp /= resp.sum(axis=1, keepdims=True)
        weights, means, covs = _m_step(x, resp, reg)
    else:
        weights, means, covs = (np.array(a, dtype=np.float64) for a in init)
        weights = weights / weights.sum()
    factors = np.linalg.cholesky(covs)
    history = []
    reseeded = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        logj = _log_joint(x, weights, means, factors)
        norm = logsumexp(logj, axis=1)
        ll = float(norm.sum())
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            converged = True
            break
        resp = np.exp(logj - norm[:, None])
        nk = resp.sum(axis=0)
        for k in np.flatnonzero(nk < 2.0):
            worst = int(np.argmin(norm))
            resp[:, k] = 0.0
            d2 = ((x - x[worst]) ** 2).sum(axis=1)
            near = np.argsort(d2, kind="stable")[: max(2, min(n, p + 1))]
            resp[near] = 0.0
            resp[near, k] = 1.0
            reseeded += 1
        resp += 1e-300
        resp /= resp.sum(axis=1, keepdims=True)
        weights, means, covs = _m_step(x, resp, reg)
        factors = np.linalg.cholesky(covs)
    else:
        ll = float(logsumexp(_log_joint(x, weights, means, factors), axis=1).sum())
        history.append(ll)
    weights = weights / weights.sum()
    prior = MixturePrior(weights, means, factors)
    return EMResult(prior, history[-1], history, it, converged, reseeded)


def refit_with_new_classes(prior: MixturePrior, points, k_new, new_means=None,
                           max_iter=100, tol=1e-6, seed=0, reg=1e-6):
    """Grow the mixture to ``K + k_new`` components and refit by EM.

    Existing components start where they were; new ones start at
    ``new_means`` (defaults to k-means++ picks among the worst-explained
    points) with the average existing covariance.
    """
    if k_new < 0:
        raise ValueError("k_new must be >= 0")
    x = np.asarray(getattr(points, "data", points), dtype=np.float64)
    K = prior.n_components
    covs = prior.covariances
    means = prior.means
    if k_new:
        if new_means is None or len(new_means) < k_new:
            rng = make_rng([seed, 7])
            ll = logsumexp(_log_joint(x, prior.weights, prior.means, prior.factors), axis=1)
            pool = x[np.argsort(ll, kind="stable")[: max(k_new, len(x) // 10)]]
            new_means = kmeans_pp(pool, k_new, rng)
        new_means = np.asarray(new_means, dtype=np.float64)[:k_new]
        means = np.vstack([means, new_means])
        covs = np.concatenate([covs, np.repeat(covs.mean(axis=0)[None], k_new, axis=0)])
    weights = np.concatenate([prior.weights * K, np.ones(k_new)]) / (K + k_new)
    return fit_em(x, K + k_new, max_iter=max_iter, tol=tol, seed=seed, reg=reg,
                  init=(weights, means, covs))
