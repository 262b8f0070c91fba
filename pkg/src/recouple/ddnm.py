"""Dynamic dependence network models: triangular parental structure over decoupled DLMs."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from . import dlm
from .dlm import DlmSpec, NigPosterior, Regressors, StudentForecast
from .errors import DimensionError, InputError, SingularityError, StructureError

ROLES = ("core", "warmup", "cooldown")


@dataclass(frozen=True)
class ParentalStructure:
    """Per-series parental index sets.

    ``parents[j]`` lists the contemporaneous predictors of series ``j`` in the
    order their coefficients appear in the state vector.  In ``"ddnm"`` mode
    every parent must come after ``j`` in ``order`` (default: index order).
    In ``"sgdlm"`` mode ``roles[j]`` maps each parent to ``(role, since)``
    with role one of core/warmup/cooldown.
    """

    parents: tuple[tuple[int, ...], ...]
    order: tuple[int, ...] | None = None
    mode: str = "ddnm"
    roles: tuple[dict, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(tuple(int(h) for h in p) for p in self.parents))
        if self.order is not None:
            object.__setattr__(self, "order", tuple(int(i) for i in self.order))
        if self.roles is None and self.mode == "sgdlm":
            object.__setattr__(self, "roles", tuple({h: ("core", 0) for h in p} for p in self.parents))

    @property
    def q(self) -> int:
        return len(self.parents)

    @property
    def series_order(self) -> tuple[int, ...]:
        return self.order if self.order is not None else tuple(range(self.q))

    def members(self, j: int, role: str) -> list[int]:
        if self.roles is None:
            return list(self.parents[j]) if role == "core" else []
        return [h for h in self.parents[j] if self.roles[j][h][0] == role]

    def is_acyclic(self) -> bool:
        """True when the parent graph admits a triangular ordering (``|I - Gamma| = 1``)."""
        indeg = [len(set(p)) for p in self.parents]
        children: list[list[int]] = [[] for _ in range(self.q)]
        for j, p in enumerate(self.parents):
            for h in set(p):
                children[h].append(j)
        ready = [j for j in range(self.q) if indeg[j] == 0]
        seen = 0
        while ready:
            h = ready.pop()
            seen += 1
            for j in children[h]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    ready.append(j)
        return seen == self.q

    def simulation_order(self) -> list[int]:
        """Series order in which parents are always simulated before children."""
        if self.mode == "ddnm":
            return list(reversed(self.series_order))
        indeg = [len(set(p)) for p in self.parents]
        children: list[list[int]] = [[] for _ in range(self.q)]
        for j, p in enumerate(self.parents):
            for h in set(p):
                children[h].append(j)
        ready = sorted((j for j in range(self.q) if indeg[j] == 0), reverse=True)
        out = []
        while ready:
            h = ready.pop()
            out.append(h)
            for j in children[h]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    ready.append(j)
            ready.sort(reverse=True)
        if len(out) != self.q:
            raise StructureError("simultaneous parents form a cycle; no sequential simulation order")
        return out


def validate(structure: ParentalStructure) -> bool:
    q = structure.q
    if structure.mode not in ("ddnm", "sgdlm"):
        raise StructureError(f"unknown structure mode {structure.mode!r}")
    order = structure.series_order
    if sorted(order) != list(range(q)):
        raise StructureError(f"order {order} is not a permutation of 0..{q - 1}")
    position = {j: i for i, j in enumerate(order)}
    for j, pa in enumerate(structure.parents):
        if len(set(pa)) != len(pa):
            raise StructureError(f"series {j}: duplicate parents {pa}")
        for h in pa:
            if not 0 <= h < q:
                raise StructureError(f"edge {h}->{j}: parent index out of range")
            if h == j:
                raise StructureError(f"edge {h}->{j}: series cannot be its own parent")
            if structure.mode == "ddnm" and position[h] <= position[j]:
                raise StructureError(f"edge {h}->{j}: parent {h} does not come after {j} in the series order")
    if structure.mode == "sgdlm":
        for j, pa in enumerate(structure.parents):
            roles = structure.roles[j]
            if set(roles) != set(pa):
                raise StructureError(f"series {j}: role partition {sorted(roles)} does not cover parents {sorted(pa)}")
            for h, (role, _) in roles.items():
                if role not in ROLES:
                    raise StructureError(f"edge {h}->{j}: unknown role {role!r}")
    return True


@dataclass(frozen=True)
class GammaMatrix:
    """Sparse simultaneous-coefficient matrix; ``entries[(j, h)]`` is the coefficient of ``y_h`` in series ``j``."""

    q: int
    entries: dict

    @classmethod
    def from_coefficients(cls, structure: ParentalStructure, coefs: Sequence[np.ndarray]) -> "GammaMatrix":
        entries = {}
        for j, pa in enumerate(structure.parents):
            c = np.asarray(coefs[j], dtype=float)
            if c.shape != (len(pa),):
                raise DimensionError(f"series {j}: {c.shape} coefficients for {len(pa)} parents")
            for h, v in zip(pa, c):
                entries[(j, h)] = float(v)
        return cls(structure.q, entries)

    def to_sparse(self) -> sparse.csr_matrix:
        if not self.entries:
            return sparse.csr_matrix((self.q, self.q))
        rows, cols = zip(*self.entries)
        return sparse.csr_matrix((list(self.entries.values()), (rows, cols)), shape=(self.q, self.q))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.q, self.q))
        for (j, h), v in self.entries.items():
            out[j, h] = v
        return out


def gamma_batch(structure: ParentalStructure, coefs: Sequence[np.ndarray]) -> np.ndarray:
    """Dense ``(N, q, q)`` Gamma from per-series coefficient samples ``(N, |pa_j|)``."""
    N = next((np.shape(c)[0] for c in coefs if np.ndim(c) == 2), 1)
    out = np.zeros((N, structure.q, structure.q))
    for j, pa in enumerate(structure.parents):
        if pa:
            out[:, j, list(pa)] = coefs[j]
    return out


@dataclass(frozen=True)
class JointMoments:
    mean: np.ndarray
    precision: np.ndarray
    crosstalk: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.precision)


def joint_moments(mu, gamma: GammaMatrix, lam) -> JointMoments:
    """Reduced-form mean ``A mu`` and precision ``(I - Gamma)' Lambda (I - Gamma)``."""
    mu = np.asarray(mu, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise InputError("precisions must be positive")
    B = (sparse.identity(gamma.q, format="csc") - gamma.to_sparse().tocsc()).tocsc()
    omega = (B.T @ sparse.diags(lam) @ B).toarray()
    try:
        lu = splinalg.splu(B)
    except RuntimeError as exc:
        raise SingularityError(f"I - Gamma is singular: {exc}") from exc
    A = lu.solve(np.eye(gamma.q))
    if not np.all(np.isfinite(A)):
        raise SingularityError("I - Gamma is singular")
    return JointMoments(A @ mu, 0.5 * (omega + omega.T), A)


def crosstalk_series(mu, gamma: GammaMatrix, max_terms: int | None = None, tol: float = 1e-14) -> np.ndarray:
    """``mu + Gamma mu + Gamma^2 mu + ...``; diagnostic form of ``A mu``."""
    G = gamma.to_sparse()
    term = np.asarray(mu, dtype=float)
    total = term.copy()
    limit = max_terms if max_terms is not None else 10_000
    for _ in range(limit):
        term = G @ term
        if not np.any(term):
            break
        total += term
        if np.max(np.abs(term)) < tol * max(1.0, np.max(np.abs(total))):
            break
    return total


@dataclass(frozen=True)
class SeriesModel:
    """One decoupled DLM: own predictors followed by parental coefficients in the state."""

    spec: DlmSpec
    post: NigPosterior

    @property
    def regressors(self) -> Regressors:
        return self.spec.regression_builder or Regressors()

    @property
    def n_parents(self) -> int:
        return self.spec.state_dim - self.regressors.size

    def with_post(self, post: NigPosterior) -> "SeriesModel":
        return SeriesModel(self.spec, post)


def series_spec(regressors: Regressors, n_parents: int, delta_own: float = 0.99,
                delta_parents: float = 0.99, beta: float = 0.98) -> DlmSpec:
    p = regressors.size + n_parents
    return DlmSpec(np.eye(p), (regressors.size, n_parents), (delta_own, delta_parents), beta, regressors)


def make_series_model(regressors: Regressors, n_parents: int, *, delta_own: float = 0.99,
                      delta_parents: float = 0.99, beta: float = 0.98, mean=0.0, scale=1.0,
                      dof: float = 1.0, point_volatility: float = 1.0) -> SeriesModel:
    spec = series_spec(regressors, n_parents, delta_own, delta_parents, beta)
    return SeriesModel(spec, dlm.initial_posterior(spec.state_dim, mean, scale, dof, point_volatility))


def _pmap(fn: Callable, items: Iterable, workers: int = 1) -> list:
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def own_regressors(models: Sequence[SeriesModel], history=None, exog=None) -> list[np.ndarray]:
    return [m.regressors.build(history, exog) for m in models]


def _check_models(models: Sequence[SeriesModel], structure: ParentalStructure):
    if len(models) != structure.q:
        raise StructureError(f"{len(models)} models for {structure.q} series")
    for j, m in enumerate(models):
        if m.n_parents != len(structure.parents[j]):
            raise StructureError(f"series {j}: model has {m.n_parents} parental coefficients, "
                                 f"structure lists {len(structure.parents[j])} parents")


def regression_vector(x_j, y_t, parents: Sequence[int]) -> np.ndarray:
    x_j = np.asarray(x_j, dtype=float)
    y_pa = np.asarray(y_t, dtype=float)[..., list(parents)]
    batch = np.broadcast_shapes(x_j.shape[:-1], y_pa.shape[:-1])
    return np.concatenate([np.broadcast_to(x_j, batch + x_j.shape[-1:]),
                           np.broadcast_to(y_pa, batch + y_pa.shape[-1:])], axis=-1)


def filter_step(models: Sequence[SeriesModel], structure: ParentalStructure, y_t, x_t=None,
                history=None, exog=None, t: int | None = None, workers: int = 1
                ) -> tuple[list[SeriesModel], np.ndarray, list[StudentForecast]]:
    """Decoupled evolve/forecast/update for every series.

    ``x_t`` gives each series' own predictors; when omitted they are built
    from ``history``/``exog`` by the series regressors.  Returns updated
    models, per-series log predictive densities (their sum is the joint one)
    and the one-step forecasts used.
    """
    _check_models(models, structure)
    y_t = np.asarray(y_t, dtype=float)
    if not np.all(np.isfinite(y_t)):
        raise InputError("missing or non-finite observation; missing data is not supported")
    if x_t is None:
        x_t = own_regressors(models, history, exog)

    def one(j):
        m = models[j]
        F = regression_vector(x_t[j], y_t, structure.parents[j])
        prior = dlm.evolve(m.post, m.spec, t)
        fc = dlm.forecast_one(prior, F)
        post, lp = dlm.update(prior, F, y_t[..., j])
        return m.with_post(post), lp, fc

    out = _pmap(one, range(structure.q), workers)
    new_models = [o[0] for o in out]
    log_pred = np.stack([np.asarray(o[1]) for o in out], axis=-1)
    return new_models, log_pred, [o[2] for o in out]


@dataclass
class ForecastEnsemble:
    """Monte Carlo sample of joint future paths ``(N, horizon, q)``.

    When recorded, ``theta[j]`` ``(N, horizon, p_j)``, ``lam`` ``(N, horizon, q)``
    and ``x[j]`` ``(N, horizon, p_x)`` are the sampled states, precisions and
    own predictors; ``log_det`` ``(N, horizon)`` holds ``log|I - Gamma|``.
    """

    samples: np.ndarray
    seed: int | None = None
    theta: list | None = None
    lam: np.ndarray | None = None
    x: list | None = None
    structure: ParentalStructure | None = None
    log_det: np.ndarray | None = None
    rejected: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 3 or self.samples.shape[0] < 1:
            raise InputError("ensemble samples must be shaped (N >= 1, horizon, q)")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("ensemble contains non-finite values")

    @property
    def horizon(self) -> int:
        return self.samples.shape[1]

    def quantiles(self, probs=(0.05, 0.25, 0.5, 0.75, 0.95)) -> np.ndarray:
        """``(len(probs), horizon, q)`` marginal quantiles."""
        return np.quantile(self.samples, probs, axis=0)


def _future_exog(exog, h):
    if exog is None:
        return None
    return np.asarray(exog, dtype=float)[h]


def forecast_paths(models: Sequence[SeriesModel], structure: ParentalStructure, k: int, N: int,
                   seed: int = 0, history=None, exog=None, t: int | None = None) -> ForecastEnsemble:
    """Compositional path simulation ``y_{t+1:t+k} | D_t``.

    Within each step series are drawn parents-first; later steps evolve the
    sampled states and volatilities and read lags from the sampled path.
    ``history`` is ``(L, q)`` of observed values (most recent last) and
    ``exog`` is ``(k, n_exog)`` of known future predictors.  The stream for
    series ``j`` at step ``h`` is ``default_rng([seed, j, h])``.
    """
    if k < 1 or N < 1:
        raise InputError("horizon and sample count must be >= 1")
    _check_models(models, structure)
    q = structure.q
    hist = np.zeros((0, q)) if history is None else np.asarray(history, dtype=float).reshape(-1, q)
    L = hist.shape[0]
    path = np.empty((N, L + k, q))
    path[:, :L] = hist
    order = structure.simulation_order()

    evo = []
    for m in models:
        G = m.spec.G(t)
        prior = dlm.evolve(m.post, m.spec, t)
        W_root = dlm.psd_sqrt(prior.scale - G @ m.post.scale @ G.T)
        evo.append((prior, G, W_root))
    theta = [np.empty((N, k, m.spec.state_dim)) for m in models]
    xs = [np.empty((N, k, m.regressors.size)) for m in models]
    lam = np.empty((N, k, q))

    for h in range(k):
        for j in order:
            m = models[j]
            prior, G, W_root = evo[j]
            rng = np.random.default_rng([seed, j, h])
            if h == 0:
                th, lm = dlm.simulate(prior, N, rng)
            else:
                th, lm = dlm.propagate(theta[j][:, h - 1], lam[:, h - 1, j], W_root, G,
                                       m.post.point_volatility, m.post.dof, m.spec.volatility_discount, rng)
            x = m.regressors.build(path[:, :L + h], _future_exog(exog, h))
            F = regression_vector(x, path[:, L + h], structure.parents[j])
            path[:, L + h, j] = np.sum(F * th, axis=-1) + rng.standard_normal(N) / np.sqrt(lm)
            theta[j][:, h], lam[:, h, j], xs[j][:, h] = th, lm, x
    return ForecastEnsemble(path[:, L:], seed, theta, lam, xs, structure, np.zeros((N, k)))


def conditional_log_density(y, mu, coefs: Sequence[np.ndarray], lam, structure: ParentalStructure,
                            log_det=0.0) -> np.ndarray:
    """``log p(y | states)``: product of per-series normals times ``|I - Gamma|``.

    ``mu`` and ``lam`` are ``(..., q)``; ``coefs[j]`` is ``(..., |pa_j|)``.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    lam = np.asarray(lam, dtype=float)
    mean = mu.copy()
    for j, pa in enumerate(structure.parents):
        if pa:
            mean[..., j] += np.sum(np.asarray(coefs[j]) * y[..., list(pa)], axis=-1)
    resid = y - mean
    with np.errstate(over="ignore"):
        ll = 0.5 * (np.log(lam) - np.log(2 * np.pi) - lam * resid * resid)
    return ll.sum(axis=-1) + log_det
