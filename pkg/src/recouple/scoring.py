"""Sequential model scores, power-discounted model probabilities and PIT diagnostics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import special, stats

from .ddnm import ForecastEnsemble, SeriesModel, conditional_log_density
from .dglm import GammaPair, nb_cdf
from .dlm import StudentForecast
from .errors import InputError


@dataclass(frozen=True)
class ScoreLedger:
    """Per-model cumulative log score, power-discounted score and log probability."""

    names: tuple[str, ...]
    log_score: np.ndarray
    discounted: np.ndarray
    log_prob: np.ndarray
    alpha: float = 0.99
    steps: int = 0

    @classmethod
    def create(cls, names: Sequence[str], alpha: float = 0.99, prior: Sequence[float] | None = None) -> "ScoreLedger":
        _check_alpha(alpha)
        k = len(names)
        if k < 1:
            raise InputError("at least one model is required")
        p = np.full(k, 1.0 / k) if prior is None else np.asarray(prior, dtype=float)
        if p.shape != (k,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise InputError("prior model probabilities must be a simplex vector")
        with np.errstate(divide="ignore"):
            lp = np.log(p)
        return cls(tuple(names), np.zeros(k), np.zeros(k), lp, float(alpha))

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_prob)


def _check_alpha(alpha):
    if not 0.0 < alpha <= 1.0:
        raise InputError(f"power discount {alpha} outside (0, 1]")


def accumulate(ledger: ScoreLedger, log_liks, alpha: float | None = None) -> ScoreLedger:
    """``S <- alpha S + l`` and ``pi <- normalize(pi^alpha * exp(l))`` in log space."""
    a = ledger.alpha if alpha is None else float(alpha)
    _check_alpha(a)
    ll = np.asarray(log_liks, dtype=float)
    if ll.shape != ledger.log_score.shape:
        raise InputError(f"{ll.size} log likelihoods for {len(ledger.names)} models")
    if not np.all(np.isfinite(ll)):
        raise InputError("non-finite log likelihood")
    unnorm = a * ledger.log_prob + ll
    log_prob = unnorm - special.logsumexp(unnorm)
    return ScoreLedger(ledger.names, ledger.log_score + ll, a * ledger.discounted + ll,
                       log_prob, ledger.alpha, ledger.steps + 1)


@dataclass(frozen=True)
class PitRecord:
    values: np.ndarray
    statistic: float
    pvalue: float

    @classmethod
    def from_values(cls, u) -> "PitRecord":
        u = np.asarray(u, dtype=float)
        if np.any((u < 0) | (u > 1)):
            raise InputError("PIT values must lie in [0, 1]")
        res = stats.kstest(u, "uniform")
        return cls(u, float(res.statistic), float(res.pvalue))


def ks(u) -> PitRecord:
    return PitRecord.from_values(u)


def pit(forecast, y, rng: np.random.Generator | None = None, exposure=1.0) -> np.ndarray:
    """Probability integral transform of ``y``.

    Continuous forecasts give ``F(y)``.  Count forecasts (a :class:`GammaPair`
    with its exposure) give ``U(F(y-1), F(y))`` drawn with ``rng``.
    """
    if isinstance(forecast, StudentForecast):
        return forecast.cdf(y)
    if isinstance(forecast, GammaPair):
        y = np.asarray(y, dtype=float)
        return randomized_pit(nb_cdf(y - 1, forecast, exposure), nb_cdf(y, forecast, exposure), rng)
    raise InputError(f"unsupported forecast type {type(forecast).__name__}")


def randomized_pit(lower, upper, rng: np.random.Generator | None) -> np.ndarray:
    if rng is None:
        raise InputError("randomized PIT needs a random generator")
    lower, upper = np.broadcast_arrays(np.asarray(lower, dtype=float), np.asarray(upper, dtype=float))
    return lower + (upper - lower) * rng.random(lower.shape)


class ScoreEstimate(NamedTuple):
    value: float
    underflow: bool


def _log_mean_exp(terms: np.ndarray) -> ScoreEstimate:
    if not np.any(np.isfinite(terms)):
        return ScoreEstimate(-np.inf, True)
    return ScoreEstimate(float(special.logsumexp(terms) - np.log(terms.size)), False)


def _split_states(ensemble: ForecastEnsemble, models: Sequence[SeriesModel] | None, h: int, x=None):
    st = ensemble.structure
    if st is None or ensemble.theta is None:
        raise InputError("ensemble does not carry sampled states")
    mu, coefs = [], []
    for j, pa in enumerate(st.parents):
        th = ensemble.theta[j][:, h]
        n_own = th.shape[-1] - len(pa)
        own_x = ensemble.x[j][:, h] if x is None else x[j]
        mu.append(np.sum(own_x * th[:, :n_own], axis=-1))
        coefs.append(th[:, n_own:])
    return np.stack(mu, axis=-1), coefs, ensemble.lam[:, h]


def horizon_score(ensemble: ForecastEnsemble, h: int, y_observed) -> ScoreEstimate:
    """Rao-Blackwellized ``log p(y_{t+h} | D_t)`` from the sampled states at step ``h`` (1-based)."""
    if not 1 <= h <= ensemble.horizon:
        raise InputError(f"horizon {h} outside 1..{ensemble.horizon}")
    mu, coefs, lam = _split_states(ensemble, None, h - 1)
    log_det = 0.0 if ensemble.log_det is None else ensemble.log_det[:, h - 1]
    terms = conditional_log_density(np.asarray(y_observed, dtype=float), mu, coefs, lam,
                                    ensemble.structure, log_det)
    return _log_mean_exp(np.atleast_1d(terms))


def path_score(ensemble: ForecastEnsemble, models: Sequence[SeriesModel], y_path, history=None,
               exog=None) -> ScoreEstimate:
    """``log p(y_{t+1:t+k} | D_t)`` with own predictors rebuilt from the observed path."""
    y_path = np.asarray(y_path, dtype=float)
    k = y_path.shape[0]
    if k > ensemble.horizon:
        raise InputError("observed path longer than the ensemble horizon")
    q = y_path.shape[1]
    hist = np.zeros((0, q)) if history is None else np.asarray(history, dtype=float).reshape(-1, q)
    full = np.concatenate([hist, y_path])
    L = hist.shape[0]
    total = np.zeros(ensemble.samples.shape[0])
    for h in range(k):
        ex = None if exog is None else np.asarray(exog, dtype=float)[h]
        x = [m.regressors.build(full[:L + h], ex) for m in models]
        mu, coefs, lam = _split_states(ensemble, models, h, x)
        log_det = 0.0 if ensemble.log_det is None else ensemble.log_det[:, h]
        total = total + conditional_log_density(y_path[h], mu, coefs, lam, ensemble.structure, log_det)
    return _log_mean_exp(total)
