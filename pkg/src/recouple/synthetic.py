"""Synthetic structures and data generators for harnesses and experiments."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .ddnm import ParentalStructure, SeriesModel, series_spec
from .dlm import NigPosterior, Regressors

FIXED_DOF = 1e12


def random_ddnm_structure(q: int, rng: np.random.Generator, density: float = 0.5,
                          max_parents: int | None = None) -> ParentalStructure:
    """Identity-ordered structure; each later series is a parent with probability ``density``."""
    parents = []
    for j in range(q):
        later = [h for h in range(j + 1, q) if rng.random() < density]
        if max_parents is not None and len(later) > max_parents:
            later = sorted(rng.choice(later, max_parents, replace=False).tolist())
        parents.append(tuple(later))
    return ParentalStructure(tuple(parents))


def random_sgdlm_structure(q: int, rng: np.random.Generator, density: float = 0.3) -> ParentalStructure:
    parents = tuple(tuple(h for h in range(q) if h != j and rng.random() < density) for j in range(q))
    return ParentalStructure(parents, mode="sgdlm")


def banded_structure(q: int, size: int, mode: str = "ddnm") -> ParentalStructure:
    """Series ``j`` has the next ``size`` series (cyclically in sgdlm mode) as parents."""
    if mode == "ddnm":
        parents = tuple(tuple(range(j + 1, min(q, j + 1 + size))) for j in range(q))
    else:
        parents = tuple(tuple((j + d) % q for d in range(1, size + 1)) for j in range(q))
    return ParentalStructure(parents, mode=mode)


def fixed_state_models(structure: ParentalStructure, mu, coefs: Sequence[np.ndarray], lam) -> list[SeriesModel]:
    """Intercept-plus-parents models whose posteriors are point masses at the given states.

    The state scale is zero and the volatility dof is huge, so simulation and
    one-step forecasts are conditional on ``(mu, Gamma, Lambda)``.
    """
    out = []
    for j, pa in enumerate(structure.parents):
        spec = series_spec(Regressors(intercept=True), len(pa), 1.0, 1.0, 1.0)
        p = spec.state_dim
        mean = np.concatenate([[mu[j]], np.asarray(coefs[j], dtype=float)])
        out.append(SeriesModel(spec, NigPosterior(mean, np.zeros((p, p)), FIXED_DOF, 1.0 / lam[j])))
    return out


def prior_models(structure: ParentalStructure, regressors: Regressors | None = None, *, delta: float = 1.0,
                 beta: float = 1.0, mean: float = 0.0, scale: float = 1.0, dof: float = 5.0,
                 point_volatility: float = 1.0, batch: tuple[int, ...] = ()) -> list[SeriesModel]:
    """Identical exchangeable priors for every series, optionally replicated over ``batch``."""
    regressors = regressors or Regressors(intercept=True)
    out = []
    for pa in structure.parents:
        spec = series_spec(regressors, len(pa), delta, delta, beta)
        p = spec.state_dim
        post = NigPosterior(np.full(batch + (p,), float(mean)),
                            np.broadcast_to(scale * np.eye(p), batch + (p, p)).copy(),
                            np.full(batch, float(dof)), np.full(batch, float(point_volatility)))
        out.append(SeriesModel(spec, post))
    return out


def draw_from_prior(models: Sequence[SeriesModel], rng: np.random.Generator):
    """One ``(theta_j, lambda_j)`` draw per series (and per batch element) from each posterior."""
    thetas, lams = [], []
    for m in models:
        post = m.post
        n, s = post.dof, post.point_volatility
        lam = rng.gamma(n / 2.0, 2.0 / (n * s))
        L = np.linalg.cholesky(post.scale)
        z = rng.standard_normal(post.mean.shape)
        thetas.append(post.mean + np.einsum("...ij,...j->...i", L, z) / np.sqrt(s * lam)[..., None])
        lams.append(lam)
    return thetas, np.stack(lams, axis=-1)


def simulate_static(structure: ParentalStructure, thetas: Sequence[np.ndarray], lam: np.ndarray, T: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Data from intercept-plus-parents models with static states; returns ``(..., T, q)``.

    Works for any structure by solving ``(I - Gamma) y = mu + nu`` each step.
    """
    q = structure.q
    lam = np.asarray(lam, dtype=float)
    batch = lam.shape[:-1]
    mu = np.stack([th[..., 0] for th in thetas], axis=-1)
    B = np.broadcast_to(np.eye(q), batch + (q, q)).copy()
    for j, pa in enumerate(structure.parents):
        for k, h in enumerate(pa):
            B[..., j, h] -= thetas[j][..., 1 + k]
    nu = rng.standard_normal(batch + (T, q)) / np.sqrt(lam)[..., None, :]
    rhs = mu[..., None, :] + nu
    return np.linalg.solve(B[..., None, :, :], rhs[..., None])[..., 0]


def flow_monitor_trial(replicates: int, steps: int, rate: float = 50.0, shift_at: int | None = None,
                       shift_sd: float = 5.0, delta: float = 0.98, config=None, seed: int = 0,
                       adapt: bool = True):
    """Batched Poisson streams under the flow monitor; returns ``(signals (steps, R), levels (steps, R))``.

    With ``shift_at`` the true rate jumps by ``shift_sd`` one-step forecast
    standard deviations (measured at that step) and stays there.
    """
    from .dglm import DglmState, local_linear_trend, nb_moments
    from .netflow import MonitorConfig, MonitorState, flow_filter_step, LEVEL_F
    from .dglm import dglm_evolve, dglm_predictive

    config = config or MonitorConfig()
    rng = np.random.default_rng(seed)
    mean = np.zeros((replicates, 2))
    mean[:, 0] = np.log(rate)
    state = DglmState(mean, np.broadcast_to(np.diag([0.1, 0.001]), (replicates, 2, 2)).copy(),
                      local_linear_trend(delta))
    monitor = MonitorState.create((replicates,))
    true_rate = np.full(replicates, float(rate))
    signals = np.zeros((steps, replicates), dtype=bool)
    levels = np.zeros((steps, replicates))
    for t in range(steps):
        if shift_at is not None and t == shift_at:
            _, _, pair = dglm_predictive(dglm_evolve(state), LEVEL_F, 1.0)
            true_rate = true_rate + shift_sd * np.sqrt(nb_moments(pair, 1.0)[1])
        y = rng.poisson(true_rate)
        step = flow_filter_step(state, y, 1.0, monitor, config, adapt)
        state, monitor = step.state, step.monitor
        signals[t] = monitor.signal
        levels[t] = state.mean[:, 0] - np.log(true_rate)
    return signals, levels


def sparse_cyclic_system(q: int, k: int, rng: np.random.Generator, low: float = 0.25, high: float = 0.45,
                         max_cond: float = 50.0):
    """Random ``k``-parent SGDLM coefficients ``Gamma`` with ``cond(I - Gamma) < max_cond``.

    Returns ``(parents, Gamma, Omega)`` where ``Omega = (I - Gamma)'(I - Gamma)`` is the
    joint precision at unit series precisions.
    """
    while True:
        parents = tuple(tuple(sorted(int(h) for h in rng.choice([h for h in range(q) if h != j], k, replace=False)))
                        for j in range(q))
        G = np.zeros((q, q))
        for j, pa in enumerate(parents):
            G[j, list(pa)] = rng.choice([-1.0, 1.0], k) * rng.uniform(low, high, k)
        B = np.eye(q) - G
        if np.linalg.cond(B) < max_cond:
            return parents, G, B.T @ B


def hotspot_recovery_trial(q: int = 20, k: int = 3, steps: int = 300, seed: int = 0, draws: int = 500,
                           config=None, delta: float = 0.99, beta: float = 0.99, side_discount: float = 0.99,
                           prior_scale: float = 1.0):
    """Adaptive SGDLM started from empty parental sets on static synthetic data.

    Returns ``(recovered, null_rate, structure)``: the share of true parents in
    core at the last step and the share of null pairs (``Omega_jh = 0``) in core.
    """
    from .sgdlm import HotspotConfig, SideModel, sgdlm_step

    config = config or HotspotConfig()
    parents, G, omega = sparse_cyclic_system(q, k, np.random.default_rng([seed, 0]))
    y = np.linalg.solve(np.eye(q) - G, np.random.default_rng([seed, 1]).standard_normal((q, steps))).T
    structure = ParentalStructure(tuple(() for _ in range(q)), mode="sgdlm")
    models = prior_models(structure, delta=delta, beta=beta, scale=prior_scale, dof=5.0)
    side = SideModel.create(q, side_discount)
    rng = np.random.default_rng([seed, 2])
    for t in range(steps):
        step = sgdlm_step(models, structure, y[t], rng, draws, t=t, side=side, hotspot=config)
        models, structure, side = step.models, step.structure, step.side
    core = [set(structure.members(j, "core")) for j in range(q)]
    hits = sum(len(core[j] & set(pa)) for j, pa in enumerate(parents))
    null = [(j, h) for j in range(q) for h in range(q) if h != j and abs(omega[j, h]) < 1e-12]
    promoted = sum(h in core[j] for j, h in null)
    return hits / (q * k), promoted / max(len(null), 1), structure
