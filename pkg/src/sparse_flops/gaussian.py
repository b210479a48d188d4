"""Closed-form moments of ReLU-Gaussian activations and what is built on them.

An activation is modelled as ``max(Y, 0)`` with ``Y ~ N(mu, sigma^2)``. This
gives closed forms for the mean activation ``E[Y+]``, the activation
probability ``P(Y+ > 0)`` and their gradients in ``(mu, sigma)``, which drive

* :func:`run_trajectory`, gradient descent of a population regularizer
  directly on ``(mu_j, sigma_j)``;
* :func:`ks_fit`, a Kolmogorov-Smirnov fit of the ReLU-Gaussian CDF to
  observed activations.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

SQRT_2PI = math.sqrt(2.0 * math.pi)
SIGMA_MIN = 1e-4


class DomainError(ValueError):
    """Raised when a Gaussian scale parameter is not strictly positive."""


def _check_sigma(sigma) -> None:
    if np.any(np.asarray(sigma) <= 0):
        raise DomainError(f"sigma must be > 0, got {sigma!r}")


def _density_term(mu, sigma):
    """exp(-mu^2 / 2 sigma^2), the unnormalized Gaussian factor shared by all gradients."""
    z = np.asarray(mu, dtype=float) / np.asarray(sigma, dtype=float)
    return np.exp(-0.5 * z * z)


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def normal_cdf(x):
    """Standard normal CDF, accurate to ~1e-16 absolute (backed by ``scipy.special.ndtr``)."""
    return _out(special.ndtr(np.asarray(x, dtype=float)))


def relu_gauss_mean(mu, sigma):
    """E[max(Y, 0)] for Y ~ N(mu, sigma^2). Vectorized over numpy inputs."""
    _check_sigma(sigma)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    z = mu / sigma
    direct = sigma / SQRT_2PI * _density_term(mu, sigma) + mu * special.ndtr(z)
    # For z < 0 the two terms nearly cancel; factoring out exp(-z^2/2) and
    # writing Phi(z) through erfcx keeps ~1e-14 relative accuracy in the tail.
    zn = np.minimum(z, 0.0)
    tail = sigma * np.exp(-0.5 * zn * zn) * (1.0 / SQRT_2PI + 0.5 * zn * special.erfcx(-zn / math.sqrt(2.0)))
    return _out(np.where(z < 0, tail, direct))


def relu_gauss_prob(mu, sigma):
    """P(max(Y, 0) > 0) = 1 - Phi(-mu/sigma)."""
    _check_sigma(sigma)
    mu = np.asarray(mu, dtype=float)
    return _out(special.ndtr(mu / np.asarray(sigma, dtype=float)))


def grad_prob(mu, sigma):
    """Gradient of the activation probability, returned as ``(d/dmu, d/dsigma)``."""
    _check_sigma(sigma)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    e = _density_term(mu, sigma)
    d_mu = e / (sigma * SQRT_2PI)
    d_sigma = -mu * e / (sigma**2 * SQRT_2PI)
    return _out(d_mu), _out(d_sigma)


def grad_mean(mu, sigma):
    """Gradient of the mean activation, returned as ``(d/dmu, d/dsigma)``."""
    _check_sigma(sigma)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    d_mu = special.ndtr(mu / sigma)
    d_sigma = _density_term(mu, sigma) / SQRT_2PI
    return _out(d_mu), _out(d_sigma)


def grad_mean_sq(mu, sigma):
    """Gradient of ``E[Y+]^2``."""
    m = relu_gauss_mean(mu, sigma)
    d_mu, d_sigma = grad_mean(mu, sigma)
    return _out(2.0 * np.asarray(m) * d_mu), _out(2.0 * np.asarray(m) * d_sigma)


def grad_prob_sq(mu, sigma):
    """Gradient of ``P(Y+ > 0)^2``."""
    p = relu_gauss_prob(mu, sigma)
    d_mu, d_sigma = grad_prob(mu, sigma)
    return _out(2.0 * np.asarray(p) * d_mu), _out(2.0 * np.asarray(p) * d_sigma)


@dataclass(frozen=True)
class GaussianDim:
    mu: float
    sigma: float

    def __post_init__(self):
        _check_sigma(self.sigma)

    @property
    def prob(self) -> float:
        return relu_gauss_prob(self.mu, self.sigma)


class PopulationRegularizer(str, enum.Enum):
    """Population regularizers over independent ReLU-Gaussian dimensions."""

    F = "F"  # sum_j P(Y_j+ > 0)^2
    F_TILDE = "F_TILDE"  # sum_j E[Y_j+]^2
    L1 = "L1"  # sum_j E[Y_j+]

    def evaluate(self, mu, sigma) -> float:
        if self is PopulationRegularizer.F:
            return float(np.sum(np.asarray(relu_gauss_prob(mu, sigma)) ** 2))
        if self is PopulationRegularizer.F_TILDE:
            return float(np.sum(np.asarray(relu_gauss_mean(mu, sigma)) ** 2))
        return float(np.sum(relu_gauss_mean(mu, sigma)))

    def grad(self, mu, sigma):
        if self is PopulationRegularizer.F:
            return grad_prob_sq(mu, sigma)
        if self is PopulationRegularizer.F_TILDE:
            return grad_mean_sq(mu, sigma)
        return grad_mean(mu, sigma)


# Two-dimension toy start: activation probabilities ~(0.4, 0.1).
DEFAULT_INIT = (GaussianDim(-0.25, 1.0), GaussianDim(-1.3, 1.0))


def probability_velocity(mu, sigma, regularizer) -> np.ndarray:
    """d p_j / dt under gradient flow of ``regularizer`` on ``(mu, sigma)``."""
    reg = PopulationRegularizer(regularizer)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    g_mu, g_sigma = reg.grad(mu, sigma)
    dp_mu, dp_sigma = grad_prob(mu, sigma)
    return -(np.asarray(dp_mu) * g_mu + np.asarray(dp_sigma) * g_sigma)


def rate_ratio(mu, sigma, regularizer) -> float:
    """Ratio of instantaneous decay rates of the first two activation probabilities."""
    v = probability_velocity(mu, sigma, regularizer)
    return float(v[0] / v[1])


@dataclass
class TrajectoryState:
    dims: list[GaussianDim]
    regularizer: PopulationRegularizer
    lr: float
    steps: np.ndarray = field(repr=False)
    probs: np.ndarray = field(repr=False)
    mus: np.ndarray = field(repr=False)
    sigmas: np.ndarray = field(repr=False)
    converged: bool = False
    sigma_clamped: bool = False

    @property
    def history(self) -> list[tuple]:
        return [(int(s), *map(float, p)) for s, p in zip(self.steps, self.probs)]

    @property
    def stop_reason(self) -> str:
        return "threshold" if self.converged else "max_steps"

    @property
    def final_probs(self) -> np.ndarray:
        return self.probs[-1]

    def to_rows(self):
        """Rows of ``(step, p_1..p_d, mu_1..mu_d, sigma_1..sigma_d)``."""
        for s, p, m, sg in zip(self.steps, self.probs, self.mus, self.sigmas):
            yield (int(s), *map(float, p), *map(float, m), *map(float, sg))

    def header(self) -> list[str]:
        d = self.probs.shape[1]
        return (
            ["step"]
            + [f"p{j + 1}" for j in range(d)]
            + [f"mu{j + 1}" for j in range(d)]
            + [f"sigma{j + 1}" for j in range(d)]
        )


def run_trajectory(
    init=DEFAULT_INIT,
    regularizer="F_TILDE",
    lr: float = 1e-3,
    steps: int = 1_000_000,
    stop_prob: float | None = 0.01,
    record_every: int = 1,
) -> TrajectoryState:
    """Plain gradient descent of a population regularizer on ``(mu_j, sigma_j)``.

    Descent stops early once every activation probability is below
    ``stop_prob`` (pass ``None`` to always run ``steps`` iterations). Scales
    that would drop below ``SIGMA_MIN`` are clamped and the state is flagged.
    The final step is always recorded.
    """
    if lr <= 0:
        raise ValueError("lr must be > 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    reg = PopulationRegularizer(regularizer)
    init = [d if isinstance(d, GaussianDim) else GaussianDim(*d) for d in init]
    mu = np.array([d.mu for d in init], dtype=float)
    sigma = np.array([d.sigma for d in init], dtype=float)

    rec_steps, rec_p, rec_mu, rec_sigma = [], [], [], []

    def record(t, p):
        rec_steps.append(t)
        rec_p.append(p)
        rec_mu.append(mu.copy())
        rec_sigma.append(sigma.copy())

    clamped = False
    converged = False
    p = special.ndtr(mu / sigma)
    record(0, p)
    t = 0
    while t < steps:
        g_mu, g_sigma = reg.grad(mu, sigma)
        mu = mu - lr * g_mu
        sigma = sigma - lr * g_sigma
        if np.any(sigma < SIGMA_MIN):
            sigma = np.maximum(sigma, SIGMA_MIN)
            clamped = True
        t += 1
        p = special.ndtr(mu / sigma)
        done = stop_prob is not None and bool(np.all(p < stop_prob))
        if done or t == steps or t % record_every == 0:
            record(t, p)
        if done:
            converged = True
            break

    return TrajectoryState(
        dims=[GaussianDim(float(m), float(s)) for m, s in zip(mu, sigma)],
        regularizer=reg,
        lr=lr,
        steps=np.asarray(rec_steps),
        probs=np.asarray(rec_p),
        mus=np.asarray(rec_mu),
        sigmas=np.asarray(rec_sigma),
        converged=converged,
        sigma_clamped=clamped,
    )


# --------------------------------------------------------------------------
# KS fit of the ReLU-Gaussian CDF
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KSFit:
    mu: float
    sigma: float
    ks_distance: float
    degenerate: bool = False


def relu_gauss_cdf(x, mu, sigma):
    """CDF of max(Y, 0): zero below 0, point mass Phi(-mu/sigma) at 0, Gaussian above."""
    _check_sigma(sigma)
    x = np.asarray(x, dtype=float)
    out = special.ndtr((x - mu) / sigma)
    return _out(np.where(x < 0, 0.0, out))


class _KSObjective:
    """Exact sup-distance between the empirical CDF and a ReLU-Gaussian CDF."""

    def __init__(self, samples):
        x = np.sort(np.asarray(samples, dtype=float))
        n = x.size
        self.n = n
        self.n_zero = int(np.count_nonzero(x <= 0))
        self.pos = x[self.n_zero :]
        # Empirical CDF just after / just before each positive sample.
        self.upper = np.arange(self.n_zero + 1, n + 1) / n
        self.lower = np.arange(self.n_zero, n) / n

    def __call__(self, mu: float, sigma: float) -> float:
        if not sigma > 0:
            return np.inf
        zero_frac = self.n_zero / self.n
        d = abs(zero_frac - special.ndtr(-mu / sigma)) if self.n_zero else special.ndtr(-mu / sigma)
        if self.pos.size:
            f = special.ndtr((self.pos - mu) / sigma)
            d = max(d, float(np.max(self.upper - f)), float(np.max(f - self.lower)))
        else:
            d = max(d, 1.0 - special.ndtr(-mu / sigma))
        return float(d)


def ks_distance(samples, mu: float, sigma: float) -> float:
    """Kolmogorov-Smirnov distance between ``samples`` and ReLU(N(mu, sigma^2))."""
    _check_sigma(sigma)
    return _KSObjective(samples)(mu, sigma)


def ks_fit(
    samples,
    grid_size: int = 101,
    mu_range: tuple[float, float] = (-5.0, 5.0),
    sigma_max: float = 5.0,
    refine_iters: int = 200,
    return_grid: bool = False,
):
    """Fit ``(mu, sigma)`` of a ReLU-Gaussian by minimizing the KS distance.

    A ``grid_size`` x ``grid_size`` grid over ``mu_range`` x ``(0, sigma_max]``
    seeds a Nelder-Mead refinement, so the returned distance never exceeds
    the best grid value. An all-zero sample has no finite optimum and is
    returned with ``degenerate=True``.

    Args:
        samples: 1-d activations, at least 100, may contain exact zeros.
        return_grid: also return the ``(mus, sigmas, distances)`` grid.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size < 100:
        raise ValueError(f"ks_fit needs at least 100 samples, got {samples.size}")
    if not np.all(np.isfinite(samples)):
        raise ValueError("samples must be finite")
    if np.any(samples < 0):
        raise ValueError("ReLU activations must be non-negative")
    obj = _KSObjective(samples)

    mus = np.linspace(mu_range[0], mu_range[1], grid_size)
    sigmas = np.linspace(sigma_max / grid_size, sigma_max, grid_size)
    grid = np.empty((grid_size, grid_size))
    for a, m in enumerate(mus):
        for b, s in enumerate(sigmas):
            grid[a, b] = obj(m, s)

    if obj.n_zero == obj.n:
        # Any mu/sigma -> -inf fits; report the most negative grid corner.
        fit = KSFit(float(mus[0]), float(sigmas[0]), float(grid[0, 0]), degenerate=True)
        return (fit, (mus, sigmas, grid)) if return_grid else fit

    a, b = np.unravel_index(np.argmin(grid), grid.shape)
    x0 = np.array([mus[a], sigmas[b]])
    res = optimize.minimize(
        lambda v: obj(v[0], v[1]),
        x0,
        method="Nelder-Mead",
        options={"maxiter": refine_iters, "xatol": 1e-6, "fatol": 1e-9},
    )
    best = (float(res.x[0]), float(res.x[1]), float(res.fun))
    if not best[2] <= grid[a, b]:
        best = (float(x0[0]), float(x0[1]), float(grid[a, b]))
    fit = KSFit(*best)
    return (fit, (mus, sigmas, grid)) if return_grid else fit


def cdf_table(samples, fit: KSFit, num_points: int = 200):
    """Empirical and fitted CDFs on a shared grid, as ``(x, empirical, fitted)`` arrays."""
    x_sorted = np.sort(np.asarray(samples, dtype=float).ravel())
    hi = float(x_sorted[-1]) if x_sorted[-1] > 0 else 1.0
    grid = np.linspace(0.0, hi, num_points)
    emp = np.searchsorted(x_sorted, grid, side="right") / x_sorted.size
    fitted = relu_gauss_cdf(grid, fit.mu, fit.sigma)
    return grid, emp, np.asarray(fitted)
