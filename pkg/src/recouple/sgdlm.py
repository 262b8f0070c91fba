"""Simultaneous graphical DLMs: importance-sampling recoupling and variational decoupling."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import special
from scipy.sparse import csc_matrix
from scipy.sparse import linalg as splinalg

from . import dlm
from .ddnm import ForecastEnsemble, ParentalStructure, SeriesModel, _check_models, filter_step, gamma_batch
from .dlm import NigPosterior
from .errors import ConfigError, DegenerateWeightsError, InputError, NumericError

DENSE_LIMIT = 64
SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class IsBatch:
    theta: list
    lam: np.ndarray
    weights: np.ndarray
    ess: float
    log_det: np.ndarray

    @property
    def size(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class VbResult:
    posteriors: list
    entropy_index: float
    skipped: bool = False


def conjugate_step(models, structure: ParentalStructure, y_t, x_t=None, history=None, exog=None,
                   t: int | None = None, workers: int = 1):
    """Decoupled proposal posteriors; each series regresses on all of its simultaneous parents."""
    return filter_step(models, structure, y_t, x_t, history, exog, t, workers)


def log_abs_det(structure: ParentalStructure, gamma: np.ndarray) -> np.ndarray:
    """``log|det(I - Gamma)|`` per sample of a ``(I, q, q)`` stack; ``-inf`` when singular."""
    n, q = gamma.shape[0], structure.q
    if structure.is_acyclic():
        return np.zeros(n)
    B = np.eye(q) - gamma
    if q <= DENSE_LIMIT:
        sign, ld = np.linalg.slogdet(B)
        return np.where(sign == 0, -np.inf, ld)
    out = np.empty(n)
    for i in range(n):
        try:
            lu = splinalg.splu(csc_matrix(B[i]))
        except RuntimeError:
            out[i] = -np.inf
            continue
        with np.errstate(divide="ignore"):
            out[i] = np.sum(np.log(np.abs(lu.U.diagonal())))
    return out


def _coefficient_parts(structure: ParentalStructure, theta: Sequence[np.ndarray]):
    coefs = [th[..., th.shape[-1] - len(pa):] for th, pa in zip(theta, structure.parents)]
    return coefs


def normalize_log_weights(log_w: np.ndarray) -> tuple[np.ndarray, float]:
    log_w = np.asarray(log_w, dtype=float)
    if not np.any(np.isfinite(log_w)):
        raise DegenerateWeightsError("all importance weights are zero")
    top = np.max(log_w)
    w = np.exp(log_w - top)
    w = w / np.sum(w)
    return w, float(1.0 / np.sum(w * w))


def recouple_is(proposals: Sequence[SeriesModel], structure: ParentalStructure, I: int,
                rng: np.random.Generator) -> IsBatch:
    """Joint draws from the product of proposals weighted by ``|det(I - Gamma)|``."""
    if I < 2:
        raise InputError("importance sample size must be >= 2")
    theta, lam = [], []
    for m in proposals:
        th, lm = dlm.simulate(m.post, I, rng)
        theta.append(th)
        lam.append(lm)
    lam = np.stack(lam, axis=-1)
    if structure.is_acyclic():
        log_det = np.zeros(I)
        return IsBatch(theta, lam, np.full(I, 1.0 / I), float(I), log_det)
    log_det = log_abs_det(structure, gamma_batch(structure, _coefficient_parts(structure, theta)))
    w, ess = normalize_log_weights(log_det)
    return IsBatch(theta, lam, w, ess, log_det)


def entropy_index(weights: np.ndarray) -> float:
    """``sum_i w_i log(I w_i)``: sample KL of the weighted target from its proposal."""
    w = np.asarray(weights, dtype=float)
    pos = w > 0
    return float(max(np.sum(w[pos] * np.log(w.size * w[pos])), 0.0))


def _psi_minus_log(x: float) -> tuple[float, float]:
    """``digamma(x) - log(x)`` and its derivative; asymptotic series where they cancel."""
    if x > 1e3:
        r = 1.0 / x
        val = -r / 2 - r**2 / 12 + r**4 / 120 - r**6 / 252
        der = r**2 / 2 + r**3 / 6 - r**5 / 30 + r**7 / 42
        return val, der
    return special.digamma(x) - np.log(x), special.polygamma(1, x) - 1.0 / x


def solve_dof(c: float, tol: float = 1e-12, max_iter: int = 100, cap: float = 1e12) -> float:
    """``n = 2x`` with ``digamma(x) - log(x) = c`` (``c < 0``); capped at ``cap``.

    Newton on ``log x`` started at the asymptotic root ``-1/(2c)``.
    """
    if c >= -1.0 / cap:
        return cap
    u = np.log(-0.5 / c)
    for _ in range(max_iter):
        x = np.exp(u)
        g, dg = _psi_minus_log(x)
        step = np.clip((g - c) / (x * dg), -2.0, 2.0)
        u -= step
        if abs(step) < tol:
            return float(min(2.0 * np.exp(u), cap))
    raise NumericError(f"dof moment equation did not converge (target {c})")


def _weighted_moments(theta, lam, w):
    base = float(np.min(lam))
    lam_bar = base + float(np.sum(w * (lam - base)))  # exact when all draws agree
    c = float(np.sum(w * np.log(lam / base))) + np.log(base) - np.log(lam_bar)
    wl = w * lam
    m = (wl @ theta) / lam_bar
    d = theta - m
    return lam_bar, c, m, (d.T * wl) @ d / lam_bar


def fit_nig(theta: np.ndarray, lam: np.ndarray, weights: np.ndarray,
            proposal: NigPosterior | None = None) -> NigPosterior:
    """Weighted moment match of a normal/inverse-gamma form to ``(theta, lambda)`` draws.

    With ``proposal`` (the law the draws came from) each moment is computed as
    the proposal's exact moment plus the weighted-minus-unweighted sample
    difference.  Sampling noise shared by both sample moments cancels, so
    uniform weights return the proposal itself and repeated refits do not
    random-walk the degrees of freedom or shrink the scale matrix.
    """
    w = weights / np.sum(weights)
    lam_bar, c, m, V = _weighted_moments(theta, lam, w)
    if proposal is None:
        s = 1.0 / lam_bar
        return NigPosterior(m, dlm.symmetrize_psd(V), solve_dof(c), s)
    u_bar, c_u, m_u, V_u = _weighted_moments(theta, lam, np.full(lam.size, 1.0 / lam.size))
    s_p = float(proposal.point_volatility)
    C_p = np.asarray(proposal.scale, dtype=float)
    c_p = _psi_minus_log(float(proposal.dof) / 2.0)[0]
    s = s_p * u_bar / lam_bar
    n = solve_dof(min(c_p + c - c_u, -1e-300))
    mean = np.asarray(proposal.mean, dtype=float) + m - m_u
    # V estimates C = E[lambda d d'] / E[lambda]; mapping the unweighted sample
    # factor onto the proposal's exact one keeps the result positive definite
    try:
        L_u = np.linalg.cholesky(V_u)
        L_p = np.linalg.cholesky(C_p)
    except np.linalg.LinAlgError:
        C = C_p + V - V_u
    else:
        A = L_p @ np.linalg.solve(L_u, np.eye(L_u.shape[0]))
        C = A @ V @ A.T
    return NigPosterior(mean, dlm.symmetrize_psd(C), n, s)


def vb_decouple(batch: IsBatch, fallback: Sequence[SeriesModel] | None = None,
                min_ess_fraction: float = 0.01) -> VbResult:
    """Per-series conjugate fits to the weighted sample.

    When the effective sample size is below ``min_ess_fraction * I`` and
    ``fallback`` proposals are given, they are returned unchanged and the
    result is flagged.
    """
    K = entropy_index(batch.weights)
    if fallback is not None and batch.ess < min_ess_fraction * batch.size:
        return VbResult([m.post for m in fallback], K, True)
    props = [None] * len(batch.theta) if fallback is None else [m.post for m in fallback]
    posts = [fit_nig(th, batch.lam[:, j], batch.weights, p) for j, (th, p) in enumerate(zip(batch.theta, props))]
    return VbResult(posts, K)


@dataclass(frozen=True)
class SideModel:
    """Discounted Wishart tracker of the cross-series covariance."""

    dof: float
    scatter: np.ndarray
    mean: np.ndarray
    weight: float = 0.0
    discount: float = 0.99
    ridge: float = 1e-8

    @classmethod
    def create(cls, q: int, discount: float = 0.99, ridge: float = 1e-8) -> "SideModel":
        if not 0.0 < discount <= 1.0:
            raise InputError(f"side-model discount {discount} outside (0, 1]")
        return cls(0.0, np.zeros((q, q)), np.zeros(q), 0.0, discount, ridge)

    def precision(self) -> np.ndarray:
        q = self.mean.size
        S = self.scatter + self.ridge * max(1.0, np.trace(self.scatter) / q) * np.eye(q)
        return np.linalg.inv(S)

    def partial_correlations(self) -> np.ndarray:
        P = self.precision()
        d = np.sqrt(np.diag(P))
        R = -P / np.outer(d, d)
        np.fill_diagonal(R, 1.0)
        return R


def side_update(side: SideModel, y_t) -> SideModel:
    """Discounted running mean and centred scatter (Welford form)."""
    y = np.asarray(y_t, dtype=float)
    if not np.all(np.isfinite(y)):
        raise InputError("non-finite observation")
    beta = side.discount
    w_prev = beta * side.weight
    w = w_prev + 1.0
    d = y - side.mean
    scatter = beta * side.scatter + (w_prev / w) * np.outer(d, d)
    return replace(side, dof=beta * side.dof + 1.0, scatter=0.5 * (scatter + scatter.T),
                   mean=side.mean + d / w, weight=w)


@dataclass(frozen=True)
class HotspotConfig:
    budget: int = 6
    warmup_steps: int = 10
    cooldown_steps: int = 5
    tau_promote: float = 1.645
    tau_demote: float = 0.675
    cooldown_decay: float = 0.7
    entry_scale: float = 1.0

    def __post_init__(self):
        if self.budget < 0 or self.warmup_steps < 1 or self.cooldown_steps < 1:
            raise ConfigError("hot-spot budget and phase lengths must be positive")
        if not 0.0 < self.cooldown_decay <= 1.0:
            raise ConfigError("cool-down decay must be in (0, 1]")


def coefficient_z(model: SeriesModel, parent_pos: int) -> float:
    k = model.regressors.size + parent_pos
    m = float(model.post.mean[k])
    v = float(model.post.scale[k, k])
    return abs(m) / np.sqrt(v) if v > 0 else np.inf


def hotspot_adapt(structure: ParentalStructure, side: SideModel, models: Sequence[SeriesModel], j: int,
                  t: int, config: HotspotConfig = HotspotConfig()) -> ParentalStructure:
    """One adaptation step for series ``j``'s simultaneous-parent set.

    Cool-down exit, promotion/demotion on ``|mean|/sd`` of the parental
    coefficient, then the top non-member by absolute partial correlation
    enters warm-up if the budget has room.
    """
    roles = dict(structure.roles[j])
    core = [h for h, (r, _) in roles.items() if r == "core"]
    if config.budget < len(core):
        raise ConfigError(f"series {j}: budget {config.budget} below core size {len(core)}")
    pos = {h: i for i, h in enumerate(structure.parents[j])}
    model = models[j]

    cool = sorted((since, h) for h, (r, since) in roles.items() if r == "cooldown")
    if cool and t - cool[0][0] >= config.cooldown_steps:
        del roles[cool[0][1]]
    for h, (role, since) in list(roles.items()):
        if role == "warmup" and t - since >= config.warmup_steps:
            roles[h] = ("core", t) if coefficient_z(model, pos[h]) > config.tau_promote else ("cooldown", t)
        elif role == "core" and coefficient_z(model, pos[h]) < config.tau_demote:
            roles[h] = ("cooldown", t)

    if len(roles) < config.budget:
        rho = np.abs(side.partial_correlations()[j])
        rho[j] = -1.0
        for h in roles:
            rho[h] = -1.0
        h_new = int(np.argmax(rho))
        if rho[h_new] >= 0.0:
            roles[h_new] = ("warmup", t)

    parents = [h for h in structure.parents[j] if h in roles] + [h for h in roles if h not in pos]
    new_parents = list(structure.parents)
    new_parents[j] = tuple(parents)
    new_roles = list(structure.roles)
    new_roles[j] = {h: roles[h] for h in parents}
    return ParentalStructure(tuple(new_parents), structure.order, "sgdlm", tuple(new_roles))


def align_model(model: SeriesModel, old_parents: Sequence[int], new_parents: Sequence[int],
                cooldown: Sequence[int] = (), decay: float = 1.0, entry_scale: float = 1.0) -> SeriesModel:
    """Re-index the parental block: drop exited parents (marginalize), append entrants, decay cool-downs."""
    p_own = model.regressors.size
    keep = list(range(p_own)) + [p_own + i for i, h in enumerate(old_parents) if h in set(new_parents)]
    kept = [h for h in old_parents if h in set(new_parents)]
    if kept + [h for h in new_parents if h not in kept] != list(new_parents):
        raise InputError("new parent list must extend the retained parents in order")
    post = model.post
    m = post.mean[keep]
    C = post.scale[np.ix_(keep, keep)]
    n_new = len(new_parents) - len(kept)
    if n_new:
        m = np.concatenate([m, np.zeros(n_new)])
        C = np.block([[C, np.zeros((C.shape[0], n_new))], [np.zeros((n_new, C.shape[0])), entry_scale * np.eye(n_new)]])
    if decay < 1.0:
        cool = set(cooldown)
        for i, h in enumerate(new_parents):
            if h in cool:
                m[p_own + i] *= decay
    spec = model.spec
    blocks = (p_own, len(new_parents))
    new_spec = dlm.DlmSpec(np.eye(sum(blocks)), blocks, spec.discounts, spec.volatility_discount,
                           spec.regression_builder)
    return SeriesModel(new_spec, NigPosterior(m, C, post.dof, post.point_volatility))


@dataclass(frozen=True)
class SgdlmStep:
    models: list
    structure: ParentalStructure
    log_pred: float
    series_log_pred: np.ndarray
    forecasts: list
    ess: float
    entropy: float
    flagged: bool
    side: SideModel | None = None


def sgdlm_step(models: Sequence[SeriesModel], structure: ParentalStructure, y_t, rng: np.random.Generator,
               I: int = 1000, x_t=None, history=None, exog=None, t: int = 0, side: SideModel | None = None,
               hotspot: HotspotConfig | None = None, workers: int = 1) -> SgdlmStep:
    """Conjugate step, IS recoupling, VB decoupling and optional hot-spot adaptation.

    ``log_pred`` is the joint one-step log density: the decoupled predictive
    product times the proposal-prior expectation of ``|det(I - Gamma)|``.
    """
    proposals, lp, fcs = conjugate_step(models, structure, y_t, x_t, history, exog, t, workers)
    if structure.is_acyclic():
        # |I - Gamma| = 1: weights are uniform and VB would only add Monte Carlo noise
        new_models, det_term, ess, K, flagged = list(proposals), 0.0, float(I), 0.0, False
    else:
        prior_rng, is_rng = rng.spawn(2)
        priors = [m.with_post(dlm.evolve(m.post, m.spec, t)) for m in models]
        det_term = float(special.logsumexp(recouple_is(priors, structure, I, prior_rng).log_det) - np.log(I))
        batch = recouple_is(proposals, structure, I, is_rng)
        vb = vb_decouple(batch, proposals)
        new_models = [m.with_post(p) for m, p in zip(proposals, vb.posteriors)]
        ess, K, flagged = batch.ess, vb.entropy_index, vb.skipped
    new_side = side_update(side, y_t) if side is not None else None
    new_structure = structure
    if hotspot is not None:
        if new_side is None:
            raise ConfigError("hot-spot adaptation needs a side model")
        new_models, new_structure = adapt_all(new_models, structure, new_side, t, hotspot)
    return SgdlmStep(new_models, new_structure, float(np.sum(lp)) + det_term, lp, fcs, ess, K, flagged, new_side)


def adapt_all(models: Sequence[SeriesModel], structure: ParentalStructure, side: SideModel, t: int,
              config: HotspotConfig):
    models = list(models)
    for j in range(structure.q):
        new = hotspot_adapt(structure, side, models, j, t, config)
        cooldown = [h for h, (r, _) in new.roles[j].items() if r == "cooldown"]
        models[j] = align_model(models[j], structure.parents[j], new.parents[j], cooldown,
                                config.cooldown_decay, config.entry_scale)
        structure = new
    return models, structure


def _solve_batch(B: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if B.shape[-1] <= DENSE_LIMIT:
        return np.linalg.solve(B, rhs[..., None])[..., 0]
    out = np.empty_like(rhs)
    for i in range(B.shape[0]):
        out[i] = splinalg.splu(csc_matrix(B[i])).solve(rhs[i])
    return out


def forecast_paths_sgdlm(models: Sequence[SeriesModel], structure: ParentalStructure, k: int, N: int,
                         seed: int = 0, history=None, exog=None, t: int | None = None,
                         max_redraws: int = 20) -> ForecastEnsemble:
    """Recoupled path simulation: ``(I - Gamma) y = mu + nu`` solved per sample and step.

    Uses the same per-(series, step) streams as the DDNM simulator; samples
    with singular ``I - Gamma`` are redrawn from extra streams and counted.
    """
    if k < 1 or N < 1:
        raise InputError("horizon and sample count must be >= 1")
    _check_models(models, structure)
    q = structure.q
    hist = np.zeros((0, q)) if history is None else np.asarray(history, dtype=float).reshape(-1, q)
    L = hist.shape[0]
    path = np.empty((N, L + k, q))
    path[:, :L] = hist
    evo = []
    for m in models:
        G = m.spec.G(t)
        prior = dlm.evolve(m.post, m.spec, t)
        evo.append((prior, G, dlm.psd_sqrt(prior.scale - G @ m.post.scale @ G.T)))
    theta = [np.empty((N, k, m.spec.state_dim)) for m in models]
    xs = [np.empty((N, k, m.regressors.size)) for m in models]
    lam = np.empty((N, k, q))
    log_det = np.zeros((N, k))
    rejected = 0

    def draw(j, h, idx, rng):
        m = models[j]
        prior, G, W_root = evo[j]
        if h == 0:
            th, lm = dlm.simulate(prior, idx.size, rng)
        else:
            th, lm = dlm.propagate(theta[j][idx, h - 1], lam[idx, h - 1, j], W_root, G,
                                   m.post.point_volatility, m.post.dof, m.spec.volatility_discount, rng)
        return th, lm, rng.standard_normal(idx.size) / np.sqrt(lm)

    everyone = np.arange(N)
    for h in range(k):
        nu = np.empty((N, q))
        for j in range(q):
            th, lm, e = draw(j, h, everyone, np.random.default_rng([seed, j, h]))
            theta[j][:, h], lam[:, h, j], nu[:, j] = th, lm, e
        x = [m.regressors.build(path[:, :L + h], None if exog is None else np.asarray(exog, dtype=float)[h])
             for m in models]
        coefs = _coefficient_parts(structure, [th[:, h] for th in theta])
        gam = gamma_batch(structure, coefs)
        ld = log_abs_det(structure, gam)
        bad = np.flatnonzero(~(ld > np.log(SINGULAR_TOL)))
        attempt = 0
        while bad.size:
            attempt += 1
            if attempt > max_redraws:
                raise NumericError(f"I - Gamma stayed singular after {max_redraws} redraws")
            rejected += bad.size
            for j in range(q):
                th, lm, e = draw(j, h, bad, np.random.default_rng([seed, j, h, attempt]))
                theta[j][bad, h], lam[bad, h, j], nu[bad, j] = th, lm, e
            coefs = _coefficient_parts(structure, [th[:, h] for th in theta])
            gam = gamma_batch(structure, coefs)
            ld = log_abs_det(structure, gam)
            bad = np.flatnonzero(~(ld > np.log(SINGULAR_TOL)))
        mu = np.stack([np.sum(x[j] * theta[j][:, h, :x[j].shape[-1]], axis=-1) for j in range(q)], axis=-1)
        path[:, L + h] = _solve_batch(np.eye(q) - gam, mu + nu)
        log_det[:, h] = ld
        for j in range(q):
            xs[j][:, h] = x[j]
    if rejected > 0.01 * N * k:
        warnings.warn(f"{rejected} singular I - Gamma samples redrawn ({rejected / (N * k):.1%})", RuntimeWarning)
    return ForecastEnsemble(path[:, L:], seed, theta, lam, xs, structure, log_det, rejected)
