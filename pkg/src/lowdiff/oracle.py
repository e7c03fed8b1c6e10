"""Closed-form Gaussian-mixture data laws and their exact denoisers.

Images are flattened channel-major (``[C, H, W]`` row-major) into vectors.
Because downsampling is linear, the law at every rung of the ladder is again a
Gaussian mixture, and the optimal conditional denoiser of a higher rung given a
noisy lower rung follows from Gaussian conditioning on the stacked vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.special import logsumexp

from .numerics.ops import bilinear_matrix

LOG_2PI = np.log(2.0 * np.pi)


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray  # [K]
    means: np.ndarray  # [K, d]
    covs: np.ndarray  # [K, d, d]

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.asarray(self.covs, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        k, d = mu.shape
        if w.shape != (k,) or cov.shape != (k, d, d):
            raise OracleError(f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise OracleError(f"weights must lie on the simplex, sum={w.sum()!r}")
        if not np.allclose(cov, cov.transpose(0, 2, 1), atol=1e-12):
            raise OracleError("covariances must be symmetric")
        for i, c in enumerate(cov):
            lo = np.linalg.eigvalsh(c).min()
            if lo < -1e-10:
                raise OracleError(f"component {i} covariance is not PSD (min eigenvalue {lo:.3g})")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def moments(self) -> tuple:
        """Exact mean and covariance of the mixture."""
        mean = self.weights @ self.means
        dev = self.means - mean
        cov = np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum("k,ki,kj->ij", self.weights, dev, dev)
        return mean, cov


@dataclass(frozen=True)
class JointGaussian:
    """Law of ``(x_high, A @ x_high)`` for ``x_high ~ N(mean_high, cov_high)``."""

    mean_high: np.ndarray
    cov_high: np.ndarray
    A: np.ndarray

    @property
    def d_high(self) -> int:
        return self.mean_high.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate([self.mean_high, self.A @ self.mean_high])

    @property
    def cov(self) -> np.ndarray:
        s, a = self.cov_high, self.A
        cross = s @ a.T
        return np.block([[s, cross], [cross.T, a @ cross]])


# -- linear maps ---------------------------------------------------------------------


def pool_matrix(channels: int, r: int) -> np.ndarray:
    """Matrix of 2x2 average pooling on flattened ``[C, r, r]`` images."""
    if r % 2:
        raise OracleError(f"cannot pool odd resolution {r}")
    p = np.zeros((r // 2, r))
    for i in range(r // 2):
        p[i, 2 * i : 2 * i + 2] = 0.5
    return np.kron(np.eye(channels), np.kron(p, p))


def upsample_matrix(channels: int, r: int) -> np.ndarray:
    """Matrix of bilinear 2x upsampling on flattened ``[C, r, r]`` images."""
    u = bilinear_matrix(r)
    return np.kron(np.eye(channels), np.kron(u, u))


def pushforward_linear(m: GaussianMixture, A: np.ndarray) -> GaussianMixture:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != m.dim:
        raise OracleError(f"map of shape {A.shape} cannot act on dimension {m.dim}")
    covs = np.einsum("ij,kjl,ml->kim", A, m.covs, A)
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    return GaussianMixture(m.weights, m.means @ A.T, covs)


# -- posterior means -----------------------------------------------------------------


def _factor(mat: np.ndarray):
    try:
        return sla.cho_factor(mat, lower=True, check_finite=False)
    except np.linalg.LinAlgError as e:
        raise OracleError(f"covariance solve failed: {e}") from e


class _Posterior:
    """Posterior mean of the leading ``keep`` coordinates of a Gaussian-mixture
    vector observed under independent per-coordinate Gaussian noise."""

    def __init__(self, weights, means, covs, noise_var, keep: int):
        self.log_w = np.log(np.where(weights > 0, weights, 1.0)) + np.where(weights > 0, 0.0, -np.inf)
        self.means = means
        self.keep = keep
        self.gains = []
        self.factors = []
        dim = means.shape[1]
        for cov in covs:
            f = _factor(cov + np.diag(noise_var))
            self.factors.append(f)
            # gain = cov[:keep] @ inv(cov + noise)
            self.gains.append(sla.cho_solve(f, cov[:, :keep], check_finite=False).T)
        self.dim = dim

    def log_lik(self, y: np.ndarray) -> np.ndarray:
        out = np.empty((y.shape[0], len(self.factors)))
        for k, f in enumerate(self.factors):
            r = (y - self.means[k]).T
            sol = sla.cho_solve(f, r, check_finite=False)
            logdet = 2.0 * np.log(np.diag(f[0])).sum()
            out[:, k] = self.log_w[k] - 0.5 * ((r * sol).sum(axis=0) + logdet + self.dim * LOG_2PI)
        return out

    def __call__(self, y: np.ndarray) -> np.ndarray:
        posts = [self.means[k, : self.keep] + (y - self.means[k]) @ g.T for k, g in enumerate(self.gains)]
        if len(posts) == 1:
            return posts[0]
        ll = self.log_lik(y)
        resp = np.exp(ll - logsumexp(ll, axis=1, keepdims=True))
        return np.einsum("nk,knd->nd", resp, np.stack(posts))


def _as_batch(x, dim: int) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x.reshape(1, -1) if single else x.reshape(x.shape[0], -1)
    if xb.shape[1] != dim:
        raise OracleError(f"expected vectors of dimension {dim}, got {x.shape}")
    if not np.all(np.isfinite(xb)):
        raise OracleError("non-finite input to oracle denoiser")
    return xb, single


def mixture_denoiser(m: GaussianMixture, x, sigma: float) -> np.ndarray:
    """``E[x0 | x0 + sigma * eps = x]`` for ``x0 ~ m``; accepts ``[d]`` or ``[n, d]``."""
    if not sigma > 0:
        raise OracleError("mixture_denoiser requires sigma > 0")
    xb, single = _as_batch(x, m.dim)
    post = _Posterior(m.weights, m.means, m.covs, np.full(m.dim, sigma**2), m.dim)
    out = post(xb)
    return out[0] if single else out


def mixture_log_density(m: GaussianMixture, x, sigma: float) -> np.ndarray:
    """``log p_sigma(x)`` of the noised mixture."""
    xb, single = _as_batch(x, m.dim)
    post = _Posterior(m.weights, m.means, m.covs, np.full(m.dim, sigma**2), m.dim)
    out = logsumexp(post.log_lik(xb), axis=1)
    return out[0] if single else out


def _joint_posterior(weights, joints, sigma, sigma_c) -> _Posterior:
    d = joints[0].d_high
    m = joints[0].A.shape[0]
    noise = np.concatenate([np.full(d, sigma**2), np.full(m, sigma_c**2)])
    means = np.stack([j.mean for j in joints])
    covs = np.stack([j.cov for j in joints])
    return _Posterior(np.asarray(weights, dtype=np.float64), means, covs, noise, d)


def conditional_denoiser_joint(J: JointGaussian, x_noisy, cond_noisy, sigma: float, sigma_c: float) -> np.ndarray:
    """``E[x_high | x_high + sigma*eps, A x_high + sigma_c*eps_c]`` for Gaussian ``x_high``."""
    return conditional_denoiser_mixture(np.ones(1), [J], x_noisy, cond_noisy, sigma, sigma_c)


def conditional_denoiser_mixture(weights, joints, x_noisy, cond_noisy, sigma: float, sigma_c: float) -> np.ndarray:
    """Mixture version of :func:`conditional_denoiser_joint` (one joint per component)."""
    if not sigma > 0 or sigma_c < 0:
        raise OracleError("need sigma > 0 and sigma_c >= 0")
    d, m = joints[0].d_high, joints[0].A.shape[0]
    xb, single = _as_batch(x_noisy, d)
    cb, _ = _as_batch(cond_noisy, m)
    post = _joint_posterior(weights, joints, sigma, sigma_c)
    out = post(np.concatenate([xb, cb], axis=1))
    return out[0] if single else out


def sample_mixture(m: GaussianMixture, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` draws: categorical component, then a Cholesky-factored Gaussian."""
    if n < 1:
        raise OracleError("sample_mixture needs n >= 1")
    comp = rng.choice(m.n_components, size=n, p=m.weights)
    z = rng.standard_normal((n, m.dim))
    out = np.empty((n, m.dim))
    for k in range(m.n_components):
        idx = comp == k
        out[idx] = m.means[k] + z[idx] @ _sqrt_factor(m.covs[k]).T
    return out


def _sqrt_factor(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        if vals.min() < -1e-10:
            raise OracleError(f"Cholesky failed: covariance not PSD (min eigenvalue {vals.min():.3g})")
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


# -- synthetic laws --------------------------------------------------------------------


def smooth_covariance(channels: int, r: int, variance: float = 0.25, length_scale: float = 2.0, nugget: float = 1e-3):
    """Squared-exponential covariance over the pixel grid, independent channels."""
    ys, xs = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
    pts = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    k = variance * np.exp(-0.5 * d2 / length_scale**2) + nugget * np.eye(r * r)
    return np.kron(np.eye(channels), k)


def smooth_mixture(
    channels: int,
    r: int,
    components: int = 1,
    variance: float = 0.25,
    length_scale: float = 2.0,
    nugget: float = 1e-3,
    mean_scale: float = 0.0,
    seed: int = 0,
) -> GaussianMixture:
    """Equal-weight mixture of smooth Gaussians; component means are themselves
    smooth random fields of standard deviation ``mean_scale``."""
    if r > 16 or channels * r * r > 768:
        raise OracleError(f"oracle dimension {channels}x{r}x{r} exceeds the dense cap (r <= 16, d <= 768)")
    cov = smooth_covariance(channels, r, variance, length_scale, nugget)
    rng = np.random.default_rng(seed)
    shape_cov = smooth_covariance(channels, r, 1.0, length_scale, 1e-6)
    field = np.linalg.cholesky(shape_cov)
    means = np.stack([mean_scale * field @ rng.standard_normal(cov.shape[0]) for _ in range(components)])
    if components == 1 and mean_scale == 0.0:
        means = np.zeros((1, cov.shape[0]))
    return GaussianMixture(np.full(components, 1.0 / components), means, np.repeat(cov[None], components, axis=0))


# -- cascade adaptor ------------------------------------------------------------------


class OracleModel:
    """Exact per-stage denoisers for a mixture law at the top rung.

    The condition reaching stage ``i`` is taken to be the stage-``i+1`` image
    at the configured truncation noise level, bilinearly upsampled; the
    upsampling is inverted exactly (it has full column rank).
    """

    def __init__(self, mixture: GaussianMixture, config, channels: int):
        self.config = config
        ladder = config.ladder
        r1 = ladder.resolutions[0]
        if mixture.dim != channels * r1 * r1:
            raise OracleError(f"mixture dimension {mixture.dim} does not match {channels}x{r1}x{r1}")
        self.image_shape = (channels, r1, r1)
        self.channels = channels
        self.levels = [mixture]
        self.pools = []
        for r in ladder.resolutions[:-1]:
            a = pool_matrix(channels, r)
            self.pools.append(a)
            self.levels.append(pushforward_linear(self.levels[-1], a))

    def level(self, stage: int) -> GaussianMixture:
        return self.levels[stage - 1]

    def stage_denoiser(self, stage: int):
        n = self.config.n_stages
        m = self.level(stage)
        cache: dict = {}
        if stage == n:

            def f(x, sigma, cond):
                post = cache.get(sigma)
                if post is None:
                    cache.clear()
                    post = cache[sigma] = _Posterior(m.weights, m.means, m.covs, np.full(m.dim, sigma**2), m.dim)
                xb, _ = _as_batch(x, m.dim)
                return post(xb).reshape(x.shape)

            return f

        a = self.pools[stage - 1]
        joints = [JointGaussian(mu, cov, a) for mu, cov in zip(m.means, m.covs)]
        sigma_c = self.config.cond_sigma(stage)
        r_low = self.config.ladder[stage + 1]
        unup = np.linalg.pinv(upsample_matrix(self.channels, r_low))

        def g(x, sigma, cond):
            post = cache.get(sigma)
            if post is None:
                cache.clear()
                post = cache[sigma] = _joint_posterior(m.weights, joints, sigma, sigma_c)
            xb, _ = _as_batch(x, m.dim)
            low = cond.reshape(cond.shape[0], -1) @ unup.T
            return post(np.concatenate([xb, low], axis=1)).reshape(x.shape)

        return g
