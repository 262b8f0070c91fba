"""Poisson DGLM with log link, linear-Bayes updating and multi-scale factor projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import dlm
from .dlm import DlmSpec, discount_evolution, psd_sqrt, symmetrize_psd
from .errors import DimensionError, InputError, NumericError, StructureError


@dataclass(frozen=True)
class GammaPair:
    shape: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.shape, dtype=float)
        c = np.asarray(self.rate, dtype=float)
        if np.any(r <= 0) or np.any(c <= 0):
            raise InputError("gamma shape and rate must be positive")
        object.__setattr__(self, "shape", r)
        object.__setattr__(self, "rate", c)


@dataclass(frozen=True)
class DglmState:
    """Normal state moments on the log-rate scale plus the evolution spec."""

    mean: np.ndarray
    scale: np.ndarray
    spec: DlmSpec

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float)
        C = np.asarray(self.scale, dtype=float)
        if m.shape[-1] != self.spec.state_dim or C.shape != m.shape + m.shape[-1:]:
            raise DimensionError(f"state shapes {m.shape}/{C.shape} do not match spec dim {self.spec.state_dim}")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "scale", C)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.mean.shape[:-1]


@dataclass(frozen=True)
class FactorEnsemble:
    samples: np.ndarray  # (N, horizon, factor_dim)
    source_tag: str = "M0"

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 3 or s.shape[0] < 1:
            raise StructureError("factor samples must be shaped (N >= 1, horizon, factor_dim)")
        if not np.all(np.isfinite(s)):
            raise InputError("factor samples must be finite")
        object.__setattr__(self, "samples", s)

    @property
    def factor_dim(self) -> int:
        return self.samples.shape[2]

    @property
    def horizon(self) -> int:
        return self.samples.shape[1]


def local_linear_trend(delta: float = 0.98) -> DlmSpec:
    """Level and gradient; ``F = (1, 0)``."""
    return DlmSpec(np.array([[1.0, 1.0], [0.0, 1.0]]), (2,), (delta,))


def gamma_match(f, q, tol: float = 1e-12, max_iter: int = 100) -> GammaPair:
    """Gamma ``(r, c)`` with ``digamma(r) - log c = f`` and ``trigamma(r) = q``.

    Damped Newton on ``log r`` for ``log trigamma(r) = log q`` from ``r = 1/q``.
    """
    f = np.asarray(f, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any(~(q > 0)):
        raise InputError("gamma_match requires q > 0")
    x = -np.log(q)
    target = np.log(q)
    for _ in range(max_iter):
        r = np.exp(x)
        t1 = special.polygamma(1, r)
        g = np.log(t1) - target
        if np.all(np.abs(g) < tol):
            break
        slope = r * special.polygamma(2, r) / t1
        x = x - np.clip(g / slope, -2.0, 2.0)
    else:
        raise NumericError("gamma_match Newton iteration did not converge")
    r = np.exp(x)
    c = np.exp(special.digamma(r) - f)
    return GammaPair(r, c)


def nb_logpmf(y, pair: GammaPair, exposure=1.0) -> np.ndarray:
    """Log mass of ``y`` when ``y ~ Po(exposure * mu)``, ``mu ~ Gamma(r, c)``."""
    y = np.asarray(y, dtype=float)
    r, c = pair.shape, pair.rate
    e = np.asarray(exposure, dtype=float)
    return (special.gammaln(r + y) - special.gammaln(r) - special.gammaln(y + 1.0)
            + r * (np.log(c) - np.log(c + e)) + y * (np.log(e) - np.log(c + e)))


def nb_cdf(y, pair: GammaPair, exposure=1.0) -> np.ndarray:
    """``P(Y <= y)``; zero for ``y < 0``."""
    y = np.asarray(y, dtype=float)
    p = pair.rate / (pair.rate + np.asarray(exposure, dtype=float))
    out = special.betainc(pair.shape, np.floor(np.maximum(y, 0.0)) + 1.0, p)
    return np.where(y < 0, 0.0, out)


def nb_moments(pair: GammaPair, exposure=1.0) -> tuple[np.ndarray, np.ndarray]:
    mean = exposure * pair.shape / pair.rate
    return mean, mean + mean * mean / pair.shape


def inflated_pair(pair: GammaPair, k: float, exposure=1.0) -> GammaPair:
    """Same predictive mean with the predictive standard deviation multiplied by ``k``."""
    mean, var = nb_moments(pair, exposure)
    r = mean * mean / (k * k * var - mean)
    return GammaPair(r, exposure * r / mean)


def dglm_evolve(state: DglmState, t: int | None = None) -> DglmState:
    G = state.spec.G(t)
    P = G @ state.scale @ G.T
    return DglmState(state.mean @ G.T, P + discount_evolution(P, state.spec), state.spec)


def dglm_predictive(prior: DglmState, F, exposure=1.0) -> tuple[np.ndarray, np.ndarray, GammaPair]:
    """Log-rate moments ``(f, q)`` and the matched gamma for the one-step rate."""
    F = np.asarray(F, dtype=float)
    if F.shape[-1] != prior.spec.state_dim:
        raise DimensionError("regression vector length does not match the state")
    if np.any(np.asarray(exposure) <= 0):
        raise InputError("exposure must be positive")
    f = np.sum(F * prior.mean, axis=-1)
    RF = np.einsum("...ij,...j->...i", prior.scale, F)
    q = np.sum(F * RF, axis=-1)
    return f, q, gamma_match(f, q)


def dglm_update(prior: DglmState, F, y, exposure=1.0) -> tuple[DglmState, np.ndarray]:
    """Linear-Bayes update of the prior ``(a, R)`` with count ``y``."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise InputError("counts must be finite and non-negative")
    F = np.asarray(F, dtype=float)
    f, q, pair = dglm_predictive(prior, F, exposure)
    log_pred = nb_logpmf(y, pair, exposure)
    r_post = pair.shape + y
    c_post = pair.rate + exposure
    g = special.digamma(r_post) - np.log(c_post)
    p = special.polygamma(1, r_post)
    RF = np.einsum("...ij,...j->...i", prior.scale, F)
    m = prior.mean + RF * ((g - f) / q)[..., None]
    C = prior.scale - RF[..., :, None] * RF[..., None, :] * ((1.0 - p / q) / q)[..., None, None]
    return DglmState(m, symmetrize_psd(C), prior.spec), log_pred


def dglm_filter(state: DglmState, F, y, exposure=1.0, t: int | None = None) -> tuple[DglmState, np.ndarray]:
    return dglm_update(dglm_evolve(state, t), F, y, exposure)


def _F_path(F, horizon: int, p: int) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = np.broadcast_to(F, (horizon, p))
    if F.shape[-1] != p or F.shape[-2] != horizon:
        raise DimensionError(f"regression path shape {F.shape} incompatible with horizon {horizon}, dim {p}")
    return F


def simulate_log_rates(state: DglmState, F, horizon: int, n_samples: int, rng: np.random.Generator,
                       t: int | None = None) -> np.ndarray:
    """Sampled log rates ``F_h' theta_h`` on paths from the time-t posterior.

    ``F`` is ``(p,)``, ``(horizon, p)`` or per-sample ``(n_samples, horizon, p)``.
    Evolution variance is held at its one-step value over the horizon.
    """
    if state.batch_shape:
        raise DimensionError("simulate_log_rates expects an unbatched state")
    p = state.spec.state_dim
    F = _F_path(F, horizon, p)
    G = state.spec.G(t)
    P = G @ state.scale @ G.T
    W_root = psd_sqrt(discount_evolution(P, state.spec))
    theta = state.mean + rng.standard_normal((n_samples, p)) @ psd_sqrt(state.scale).T
    out = np.empty((n_samples, horizon))
    for h in range(horizon):
        theta = theta @ G.T + rng.standard_normal((n_samples, p)) @ W_root.T
        out[:, h] = np.sum(F[..., h, :] * theta, axis=-1)
    return out


def dglm_forecast(state: DglmState, F, exposure=1.0, n_samples: int = 1000,
                  rng: np.random.Generator | None = None, horizon: int = 1,
                  method: str = "simulate") -> np.ndarray:
    """Count samples ``(n_samples, horizon)`` from the time-t posterior ``state``.

    ``method="analytic"`` draws one-step counts from the matched negative
    binomial; ``"simulate"`` samples state paths then Poisson counts.
    """
    rng = np.random.default_rng() if rng is None else rng
    e = np.broadcast_to(np.asarray(exposure, dtype=float), (horizon,))
    if np.any(e <= 0):
        raise InputError("exposure must be positive")
    if method == "analytic":
        if horizon != 1:
            raise InputError("analytic forecasting is one-step only")
        _, _, pair = dglm_predictive(dglm_evolve(state), _F_path(F, 1, state.spec.state_dim)[..., 0, :], e[0])
        mu = rng.gamma(pair.shape, 1.0 / pair.rate, size=(n_samples,) + pair.shape.shape)
        return rng.poisson(e[0] * mu).reshape(n_samples, 1).astype(float)
    if method != "simulate":
        raise InputError(f"unknown forecast method {method!r}")
    log_rate = simulate_log_rates(state, F, horizon, n_samples, rng)
    return rng.poisson(e * np.exp(log_rate)).astype(float)


def multiscale_forecast(models: list[DglmState], factors: FactorEnsemble, horizon: int,
                        x_paths: list[np.ndarray] | None = None, exposure=1.0,
                        draws_per_factor: int = 1, seed: int = 0):
    """Top-down forecasts: every factor path drives each decoupled series model.

    Series ``j`` has regression vector ``(x_j, phi)`` with ``x_j`` taken from
    ``x_paths[j]`` (``(horizon, p_x)``; intercept ``[1]`` when omitted).
    Returns a ``ForecastEnsemble`` with ``N * draws_per_factor`` pooled paths.
    """
    from .ddnm import ForecastEnsemble

    if horizon > factors.horizon:
        raise StructureError("factor ensemble shorter than the forecast horizon")
    phi = np.repeat(factors.samples[:, :horizon, :], draws_per_factor, axis=0)
    total = phi.shape[0]
    out = np.empty((total, horizon, len(models)))
    for j, model in enumerate(models):
        x = np.ones((horizon, 1)) if x_paths is None or x_paths[j] is None else np.asarray(x_paths[j], dtype=float)
        if x.shape[-1] + factors.factor_dim != model.spec.state_dim:
            raise StructureError(f"series {j}: state dim {model.spec.state_dim} != "
                                 f"{x.shape[-1]} own predictors + {factors.factor_dim} factors")
        F = np.concatenate([np.broadcast_to(x, (total, horizon, x.shape[-1])), phi], axis=-1)
        out[:, :, j] = dglm_forecast(model, F, exposure, total, np.random.default_rng([seed, j]), horizon)
    return ForecastEnsemble(out, seed)


@dataclass
class AggregateFactorModel:
    """Default aggregate model: local level plus form-free seasonal DLM on log(1 + total).

    The exported factor is the current seasonal effect; its sampled future
    path forms the ``FactorEnsemble``.
    """

    period: int
    spec: DlmSpec
    post: dlm.NigPosterior
    t: int = 0

    @classmethod
    def create(cls, period: int = 7, delta_level: float = 0.95, delta_season: float = 0.98,
               beta: float = 0.98, level0: float = 0.0, season_var: float = 0.1) -> "AggregateFactorModel":
        p = period
        G = np.zeros((p + 1, p + 1))
        G[0, 0] = 1.0
        # cyclic permutation: element 1 is always the current season
        for i in range(p):
            G[1 + i, 1 + (i + 1) % p] = 1.0
        spec = DlmSpec(G, (1, p), (delta_level, delta_season), beta)
        C = np.zeros((p + 1, p + 1))
        C[0, 0] = 1.0
        C[1:, 1:] = season_var * (np.eye(p) - 1.0 / p)
        m = np.zeros(p + 1)
        m[0] = level0
        return cls(period, spec, dlm.NigPosterior(m, C, 1.0, 0.1))

    @property
    def F(self) -> np.ndarray:
        F = np.zeros(self.period + 1)
        F[:2] = 1.0
        return F

    def observe(self, total: float) -> float:
        """Update with an aggregate count; returns the one-step log predictive."""
        prior = dlm.evolve(self.post, self.spec, self.t)
        self.post, lp = dlm.update(prior, self.F, np.log1p(total))
        self.t += 1
        return float(lp)

    @property
    def current_factor(self) -> np.ndarray:
        return self.post.mean[1:2].copy()

    def factor_ensemble(self, horizon: int, n_samples: int, rng: np.random.Generator) -> FactorEnsemble:
        prior = dlm.evolve(self.post, self.spec, self.t)
        W_root = psd_sqrt(prior.scale - self.spec.G() @ self.post.scale @ self.spec.G().T)
        theta, lam = dlm.simulate(prior, n_samples, rng)
        samples = np.empty((n_samples, horizon, 1))
        samples[:, 0, 0] = theta[:, 1]
        s, n, G = self.post.point_volatility, self.post.dof, self.spec.G()
        for h in range(1, horizon):
            theta, lam = dlm.propagate(theta, lam, W_root, G, s, n, self.spec.volatility_discount, rng)
            samples[:, h, 0] = theta[:, 1]
        return FactorEnsemble(samples, "aggregate")
