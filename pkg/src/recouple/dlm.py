"""Univariate conjugate discount DLM.

Scale convention (used throughout the package): a posterior
``NigPosterior(m, C, n, s)`` means

    lambda | D   ~ Gamma(n/2, rate = n*s/2)
    theta | lambda, D ~ N(m, C / (s * lambda))

so that marginally ``theta ~ T_n(m, C)`` and ``Var(theta | D) = C n/(n-2)``.
All arrays may carry leading batch axes: ``mean`` is ``(..., p)``, ``scale``
is ``(..., p, p)`` and ``dof``/``point_volatility`` are ``(...)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .errors import DegenerateForecastError, DimensionError, InputError

Q_FLOOR = 1e-12


@dataclass(frozen=True)
class Regressors:
    """Own-series predictors: intercept, lagged outcomes and exogenous columns.

    ``lags`` holds ``(series, lag)`` pairs with ``lag >= 1``; ``exog`` holds
    column indices into the exogenous vector supplied at each time.
    """

    intercept: bool = True
    lags: tuple[tuple[int, int], ...] = ()
    exog: tuple[int, ...] = ()

    def __post_init__(self):
        for series, lag in self.lags:
            if lag < 1 or series < 0:
                raise InputError(f"invalid lag term {(series, lag)}")

    @property
    def size(self) -> int:
        return int(self.intercept) + len(self.lags) + len(self.exog)

    @property
    def max_lag(self) -> int:
        return max((lag for _, lag in self.lags), default=0)

    def build(self, history: np.ndarray | None, exog: np.ndarray | None = None) -> np.ndarray:
        """Own-predictor vector from ``history`` (``(..., L, q)``, most recent last)."""
        parts = []
        batch = ()
        if history is not None:
            history = np.asarray(history, dtype=float)
            batch = history.shape[:-2]
        if self.intercept:
            parts.append(np.ones(batch + (1,)))
        if self.lags:
            if history is None or history.shape[-2] < self.max_lag:
                raise InputError(f"history shorter than the largest lag ({self.max_lag})")
            parts.append(np.stack([history[..., -lag, series] for series, lag in self.lags], axis=-1))
        if self.exog:
            if exog is None:
                raise InputError("exogenous predictors required but not supplied")
            ex = np.asarray(exog, dtype=float)[..., list(self.exog)]
            parts.append(np.broadcast_to(ex, batch + (len(self.exog),)))
        if not parts:
            return np.zeros(batch + (0,))
        return np.concatenate([np.broadcast_to(p, batch + p.shape[-1:]) for p in parts], axis=-1)


@dataclass(frozen=True)
class DlmSpec:
    """Transition, state blocks with their discount factors, volatility discount.

    ``transition`` is a matrix or a callable ``t -> G_t``.
    """

    transition: np.ndarray | Callable[[int | None], np.ndarray]
    blocks: tuple[int, ...]
    discounts: tuple[float, ...]
    volatility_discount: float = 1.0
    regression_builder: Regressors | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.blocks) != len(self.discounts):
            raise DimensionError("one discount factor per state block is required")
        if any(b < 0 for b in self.blocks):
            raise DimensionError("negative block size")
        for d in self.discounts:
            if not 0.0 < d <= 1.0:
                raise InputError(f"state discount {d} outside (0, 1]")
        if not 0.0 < self.volatility_discount <= 1.0:
            raise InputError(f"volatility discount {self.volatility_discount} outside (0, 1]")
        if not callable(self.transition):
            G = np.asarray(self.transition, dtype=float)
            if G.shape != (self.state_dim, self.state_dim):
                raise DimensionError(f"transition shape {G.shape} does not match state_dim {self.state_dim}")
            object.__setattr__(self, "transition", G)

    @property
    def state_dim(self) -> int:
        return int(sum(self.blocks))

    def G(self, t: int | None = None) -> np.ndarray:
        G = self.transition(t) if callable(self.transition) else self.transition
        G = np.asarray(G, dtype=float)
        if G.shape != (self.state_dim, self.state_dim):
            raise DimensionError(f"transition shape {G.shape} does not match state_dim {self.state_dim}")
        return G

    def block_slices(self) -> list[slice]:
        out, start = [], 0
        for size in self.blocks:
            out.append(slice(start, start + size))
            start += size
        return out


@dataclass(frozen=True)
class NigPosterior:
    mean: np.ndarray
    scale: np.ndarray
    dof: np.ndarray
    point_volatility: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float)
        C = np.asarray(self.scale, dtype=float)
        n = np.asarray(self.dof, dtype=float)
        s = np.asarray(self.point_volatility, dtype=float)
        if C.shape != m.shape + m.shape[-1:]:
            raise DimensionError(f"scale shape {C.shape} incompatible with mean shape {m.shape}")
        if np.any(n <= 0):
            raise InputError("degrees of freedom must be positive")
        if np.any(s <= 0):
            raise InputError("point volatility must be positive")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "scale", C)
        object.__setattr__(self, "dof", n)
        object.__setattr__(self, "point_volatility", s)

    @property
    def state_dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.mean.shape[:-1]

    def covariance(self) -> np.ndarray:
        """Marginal ``Var(theta)``; infinite when ``dof <= 2``."""
        n = self.dof[..., None, None]
        with np.errstate(divide="ignore"):
            factor = np.where(n > 2, n / np.maximum(n - 2, 1e-300), np.inf)
        return self.scale * factor

    def __getitem__(self, idx) -> "NigPosterior":
        return NigPosterior(self.mean[idx], self.scale[idx], self.dof[idx], self.point_volatility[idx])


@dataclass(frozen=True)
class StudentForecast:
    """One-step Student-t forecast; ``spread`` is the squared scale ``q``."""

    location: np.ndarray
    spread: np.ndarray
    dof: np.ndarray

    @property
    def sd_scale(self) -> np.ndarray:
        return np.sqrt(self.spread)

    def logpdf(self, y) -> np.ndarray:
        return t_logpdf(y, self.location, self.spread, self.dof)

    def cdf(self, y) -> np.ndarray:
        return special.stdtr(self.dof, (np.asarray(y) - self.location) / self.sd_scale)

    def ppf(self, u) -> np.ndarray:
        return self.location + self.sd_scale * special.stdtrit(self.dof, u)

    def inflated(self, k: float) -> "StudentForecast":
        return StudentForecast(self.location, self.spread * k * k, self.dof)


def _log_gamma_half_ratio(x) -> np.ndarray:
    """``log G(x + 1/2) - log G(x)``; asymptotic series where the difference cancels."""
    x = np.asarray(x, dtype=float)
    big = x > 500.0
    xs = np.where(big, x, 1.0)
    asym = 0.5 * np.log(xs) - 1.0 / (8.0 * xs) + 1.0 / (192.0 * xs ** 3)
    xd = np.where(big, 1.0, x)
    direct = special.gammaln(xd + 0.5) - special.gammaln(xd)
    return np.where(big, asym, direct)


def t_logpdf(y, loc, spread, dof) -> np.ndarray:
    """Log density of a Student-t with squared scale ``spread``."""
    z2 = (np.asarray(y, dtype=float) - loc) ** 2 / spread
    half = 0.5 * (dof + 1.0)
    return (_log_gamma_half_ratio(0.5 * np.asarray(dof, dtype=float))
            - 0.5 * np.log(dof * np.pi * spread) - half * np.log1p(z2 / dof))


def symmetrize_psd(C: np.ndarray) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues at zero."""
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    if C.shape[-1] == 0:
        return C
    w, V = np.linalg.eigh(C)
    if np.any(w < 0):
        C = (V * np.maximum(w, 0.0)[..., None, :]) @ np.swapaxes(V, -1, -2)
        C = 0.5 * (C + np.swapaxes(C, -1, -2))
    return C


def psd_sqrt(C: np.ndarray) -> np.ndarray:
    """Factor ``L`` with ``L L' = C`` for symmetric PSD (possibly singular) ``C``."""
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (C + np.swapaxes(C, -1, -2)))
        return V * np.sqrt(np.maximum(w, 0.0))[..., None, :]


def discount_evolution(P: np.ndarray, spec: DlmSpec) -> np.ndarray:
    """Evolution variance ``W`` implied by blockwise discounting of ``P = G C G'``."""
    W = np.zeros_like(P)
    for sl, delta in zip(spec.block_slices(), spec.discounts):
        if delta < 1.0:
            W[..., sl, sl] = P[..., sl, sl] * (1.0 / delta - 1.0)
    return W


def evolve(post: NigPosterior, spec: DlmSpec, t: int | None = None) -> NigPosterior:
    """Time-t prior from the time t-1 posterior."""
    if post.state_dim != spec.state_dim:
        raise DimensionError(f"posterior dim {post.state_dim} != spec state_dim {spec.state_dim}")
    G = spec.G(t)
    a = post.mean @ G.T
    P = G @ post.scale @ G.T
    R = P + discount_evolution(P, spec)
    return NigPosterior(a, R, spec.volatility_discount * post.dof, post.point_volatility)


def _check_F(prior: NigPosterior, F) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.shape[-1] != prior.state_dim:
        raise DimensionError(f"regression vector length {F.shape[-1]} != state_dim {prior.state_dim}")
    return F


def forecast_one(prior: NigPosterior, F) -> StudentForecast:
    F = _check_F(prior, F)
    f = np.sum(F * prior.mean, axis=-1)
    RF = np.einsum("...ij,...j->...i", prior.scale, F)
    q = np.sum(F * RF, axis=-1) + prior.point_volatility
    if np.any(~(q >= Q_FLOOR)):
        raise DegenerateForecastError(f"forecast variance below {Q_FLOOR}")
    return StudentForecast(f, q, prior.dof)


def update(prior: NigPosterior, F, y) -> tuple[NigPosterior, np.ndarray]:
    """Conjugate observation update; returns the posterior and ``log p(y | D_{t-1})``."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise InputError("observation is not finite")
    F = _check_F(prior, F)
    fc = forecast_one(prior, F)
    log_pred = fc.logpdf(y)
    e = y - fc.location
    q = fc.spread
    RF = np.einsum("...ij,...j->...i", prior.scale, F)
    A = RF / q[..., None]
    m = prior.mean + A * e[..., None]
    n0 = prior.dof
    s0 = prior.point_volatility
    n = n0 + 1.0
    s = s0 * (n0 + e * e / q) / n
    C = (s / s0)[..., None, None] * (prior.scale - A[..., :, None] * A[..., None, :] * q[..., None, None])
    return NigPosterior(m, symmetrize_psd(C), n, s), log_pred


def simulate(post: NigPosterior, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` joint samples of ``(theta, lambda)``.

    Returns ``theta`` of shape ``(count, *batch, p)`` and ``lambda`` of shape
    ``(count, *batch)``.
    """
    if count < 1:
        raise InputError("count must be >= 1")
    batch = post.batch_shape
    n, s = post.dof, post.point_volatility
    lam = rng.gamma(shape=n / 2.0, scale=2.0 / (n * s), size=(count,) + batch)
    z = rng.standard_normal((count,) + batch + (post.state_dim,))
    L = psd_sqrt(post.scale)
    theta = post.mean + np.einsum("...ij,...j->...i", L, z) / np.sqrt(s * lam)[..., None]
    return theta, lam


def propagate(theta: np.ndarray, lam: np.ndarray, W_root: np.ndarray, G: np.ndarray,
              s: np.ndarray, n: np.ndarray, beta: float, rng: np.random.Generator
              ) -> tuple[np.ndarray, np.ndarray]:
    """One further step of the discount state/volatility evolution along a sampled path.

    ``lambda' = lambda * eta / beta`` with ``eta ~ Beta(beta n/2, (1-beta) n/2)``
    and ``theta' = G theta + omega``, ``omega ~ N(0, W / (s lambda'))`` where
    ``W_root`` factors the evolution variance held fixed over the horizon.
    """
    if beta < 1.0:
        eta = rng.beta(beta * n / 2.0, (1.0 - beta) * n / 2.0, size=lam.shape)
        lam = lam * eta / beta
    z = rng.standard_normal(theta.shape)
    theta = theta @ G.T + np.einsum("...ij,...j->...i", W_root, z) / np.sqrt(s * lam)[..., None]
    return theta, lam


def initial_posterior(state_dim: int, mean: Sequence[float] | float = 0.0, scale: float | np.ndarray = 1.0,
                      dof: float = 1.0, point_volatility: float = 1.0) -> NigPosterior:
    m = np.broadcast_to(np.asarray(mean, dtype=float), (state_dim,)).copy()
    C = np.asarray(scale, dtype=float)
    if C.ndim == 0:
        C = float(C) * np.eye(state_dim)
    return NigPosterior(m, C, np.asarray(float(dof)), np.asarray(float(point_volatility)))
