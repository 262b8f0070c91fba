"""Decoupled Poisson flow models, gravity emulation and Bayes-factor monitoring.

Flow streams for ``I`` nodes are held in one batched DGLM state of shape
``(I, I + 2)``: column 0 is the in-flow ``0 -> i`` and column ``1 + j`` is the
flow ``i -> j`` for ``j = 0..I`` (``j = 0`` leaves the network).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .dglm import DglmState, GammaPair, dglm_evolve, dglm_predictive, dglm_update, inflated_pair, local_linear_trend, nb_logpmf
from .errors import InputError

LEVEL_F = np.array([1.0, 0.0])


@dataclass(frozen=True)
class FlowPanel:
    """Counts ``(T, I + 1, I + 1)``; ``counts[t, a, b]`` is the flow ``a -> b`` and node 0 is outside."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 3 or c.shape[1] != c.shape[2] or c.shape[1] < 2:
            raise InputError("flow counts must be shaped (T, I + 1, I + 1) with I >= 1")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise InputError("flow counts must be finite and non-negative")
        object.__setattr__(self, "counts", c.astype(float))

    @property
    def nodes(self) -> int:
        return self.counts.shape[1] - 1

    @property
    def T(self) -> int:
        return self.counts.shape[0]

    def occupancy(self) -> np.ndarray:
        """``n[t, i]``: total arrivals at node ``i`` (stays included), ``(T, I)``."""
        return self.counts[:, :, 1:].sum(axis=1)

    def stream_counts(self, t: int) -> np.ndarray:
        """``(I, I + 2)`` counts in stream layout."""
        c = self.counts[t]
        return np.concatenate([c[0, 1:, None], c[1:, :]], axis=1)

    @classmethod
    def from_long(cls, rows, nodes: int | None = None) -> "FlowPanel":
        """From ``(t, from_node, to_node, count)`` rows with ``t = 0..T-1``; missing cells are 0."""
        arr = np.asarray(rows, dtype=float).reshape(-1, 4)
        if np.any(arr[:, 3] < 0):
            raise InputError("negative flow count")
        I = int(arr[:, 1:3].max()) if nodes is None else nodes
        if np.any(arr[:, 1:3] < 0) or np.any(arr[:, 1:3] > I) or np.any(arr[:, 1:3] % 1):
            raise InputError(f"node index outside 0..{I}")
        T = int(arr[:, 0].max()) + 1
        counts = np.zeros((T, I + 1, I + 1))
        idx = arr[:, :3].astype(int)
        np.add.at(counts, (idx[:, 0], idx[:, 1], idx[:, 2]), arr[:, 3])
        return cls(counts)


def occupancy_offset(n_prev, n_prev2) -> np.ndarray:
    """``n_{t-1} / n_{t-2}``, or 1 where either is zero."""
    a = np.asarray(n_prev, dtype=float)
    b = np.asarray(n_prev2, dtype=float)
    ok = (a > 0) & (b > 0)
    return np.where(ok, a / np.where(ok, b, 1.0), 1.0)


def flow_exposures(panel: FlowPanel, t: int) -> np.ndarray:
    """``(I, I + 2)`` exposures: 1 for in-flows, the occupancy offset for node-origin flows."""
    n = panel.occupancy()
    I = panel.nodes
    m = occupancy_offset(n[t - 1], n[t - 2]) if t >= 2 else np.ones(I)
    return np.concatenate([np.ones((I, 1)), np.broadcast_to(m[:, None], (I, I + 1))], axis=1)


def initial_flow_state(nodes: int, delta: float = 0.98, level: float | np.ndarray = 0.0,
                       level_var: float = 1.0, slope_var: float = 0.01) -> DglmState:
    shape = (nodes, nodes + 2)
    mean = np.zeros(shape + (2,))
    mean[..., 0] = level
    scale = np.broadcast_to(np.diag([level_var, slope_var]), shape + (2, 2)).copy()
    return DglmState(mean, scale, local_linear_trend(delta))


@dataclass(frozen=True)
class MonitorConfig:
    """Alternative spread inflation ``k``, signal thresholds and exceptional discount.

    Calibrated on synthetic local-trend Poisson flows (see ``scripts/calibrate_monitor.py``).
    """

    k: float = 2.5
    tau: float = float(np.exp(7.5))
    l_min: int = 60
    delta_exceptional: float = 0.1


@dataclass(frozen=True)
class MonitorState:
    """Cumulative Bayes factor of the alternative against the model, and its run length."""

    L: np.ndarray
    run: np.ndarray
    signal: np.ndarray

    @classmethod
    def create(cls, shape=()) -> "MonitorState":
        return cls(np.ones(shape), np.zeros(shape, dtype=int), np.zeros(shape, dtype=bool))

    @property
    def evidence(self) -> np.ndarray:
        """``max(1, L)``: equals 1 while the model has fitted at least as well throughout."""
        return np.maximum(self.L, 1.0)


def monitor_step(state: MonitorState, log_pred_model, log_pred_alt, config: MonitorConfig = MonitorConfig()
                 ) -> MonitorState:
    """Sequential Bayes-factor tracking; signalled streams restart at ``L = 1, run = 0``.

    ``H = p_alt / p_model``, ``L_t = H max(1, L_{t-1})`` and the run grows
    while ``L_{t-1} > 1``.
    """
    lm = np.asarray(log_pred_model, dtype=float)
    la = np.asarray(log_pred_alt, dtype=float)
    if not (np.all(np.isfinite(lm)) and np.all(np.isfinite(la))):
        raise InputError("monitor needs finite log densities")
    prev = np.where(state.signal, 1.0, state.L)
    prev_run = np.where(state.signal, 0, state.run)
    log_L = (la - lm) + np.log(np.maximum(prev, 1.0))
    run = 1 + prev_run * (prev > 1.0)
    L = np.exp(log_L)
    signal = (log_L > np.log(config.tau)) | ((run >= config.l_min) & (log_L > 0.0))
    return MonitorState(L, run, signal)


def intervene(model: DglmState, delta_exceptional: float, mask=None) -> DglmState:
    """Divide the state scale by ``delta_exceptional`` (where ``mask`` is true)."""
    if not 0.0 < delta_exceptional <= 1.0:
        raise InputError("exceptional discount must be in (0, 1]")
    factor = 1.0 / delta_exceptional
    if mask is None:
        return replace(model, scale=model.scale * factor)
    f = np.where(np.asarray(mask, dtype=bool), factor, 1.0)[..., None, None]
    return replace(model, scale=model.scale * f)


@dataclass(frozen=True)
class FlowStep:
    state: DglmState
    log_pred: np.ndarray
    log_pred_alt: np.ndarray
    monitor: MonitorState
    pair: GammaPair


def flow_filter_step(state: DglmState, y, exposure, monitor: MonitorState | None = None,
                     config: MonitorConfig = MonitorConfig(), adapt: bool = True) -> FlowStep:
    """Evolve, monitor and update every flow stream at once.

    Streams that signal get their prior scale inflated before the update
    (when ``adapt``) and their monitor reset.
    """
    prior = dglm_evolve(state)
    _, _, pair = dglm_predictive(prior, LEVEL_F, exposure)
    y = np.asarray(y, dtype=float)
    lp = nb_logpmf(y, pair, exposure)
    lp_alt = nb_logpmf(y, inflated_pair(pair, config.k, exposure), exposure)
    mon = monitor_step(monitor if monitor is not None else MonitorState.create(y.shape), lp, lp_alt, config)
    if adapt and np.any(mon.signal):
        prior = intervene(prior, config.delta_exceptional, mon.signal)
    post, _ = dglm_update(prior, LEVEL_F, y, exposure)
    return FlowStep(post, lp, lp_alt, mon, pair)


@dataclass(frozen=True)
class GravityEffects:
    intensity: np.ndarray
    origin: np.ndarray
    destination: np.ndarray
    affinity: np.ndarray


def gravity_decompose(phi) -> GravityEffects:
    """Two-way log-scale decomposition of ``(..., I, I)`` positive rates."""
    phi = np.asarray(phi, dtype=float)
    if np.any(~(phi > 0)):
        raise InputError("gravity decomposition needs positive rates")
    lp = np.log(phi)
    mu = lp.mean(axis=(-2, -1))
    row = lp.mean(axis=-1) - mu[..., None]
    col = lp.mean(axis=-2) - mu[..., None]
    resid = lp - mu[..., None, None] - row[..., :, None] - col[..., None, :]
    return GravityEffects(np.exp(mu), np.exp(row), np.exp(col), np.exp(resid))


def gravity_recompose(effects: GravityEffects) -> np.ndarray:
    return (effects.intensity[..., None, None] * effects.origin[..., :, None]
            * effects.destination[..., None, :] * effects.affinity)


def gravity_constraints(effects: GravityEffects) -> dict:
    """Worst-case geometric means (over samples) of the four aliasing constraints."""
    def worst(log_gm):
        log_gm = np.atleast_1d(log_gm)
        return float(np.exp(log_gm.flat[np.argmax(np.abs(log_gm))]))
    return {"origin_gm": worst(np.log(effects.origin).mean(-1)),
            "destination_gm": worst(np.log(effects.destination).mean(-1)),
            "affinity_row_gm": worst(np.log(effects.affinity).mean(-1)),
            "affinity_col_gm": worst(np.log(effects.affinity).mean(-2))}


def sample_node_rates(state: DglmState, n: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, I, I)`` posterior samples of within-network rates ``phi_ij`` (node 0 excluded)."""
    m = state.mean[:, 2:, 0]
    sd = np.sqrt(np.maximum(state.scale[:, 2:, 0, 0], 0.0))
    return np.exp(m + sd * rng.standard_normal((n,) + m.shape))


def _summary(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo, hi = np.quantile(x, [0.025, 0.975], axis=0)
    return x.mean(axis=0), lo, hi


def run_netflow(panel: FlowPanel, delta: float = 0.98, config: MonitorConfig = MonitorConfig(),
                gravity_samples: int = 200, seed: int = 0, adapt: bool = True) -> Iterator[dict]:
    """Filter all streams and yield one record per ``(t, quantity, node/pair)``.

    Gravity effects are summarized over posterior samples of the node-node
    rates; ``phi`` records carry the stream's monitor signal.
    """
    I = panel.nodes
    y0 = panel.stream_counts(0)
    state = initial_flow_state(I, delta, level=np.log1p(y0))
    monitor = MonitorState.create((I, I + 2))
    for t in range(panel.T):
        step = flow_filter_step(state, panel.stream_counts(t), flow_exposures(panel, t), monitor, config, adapt)
        state, monitor = step.state, step.monitor
        rng = np.random.default_rng([seed, t])
        phi = sample_node_rates(state, gravity_samples, rng)
        g = gravity_decompose(phi)
        rate_mean, rate_lo, rate_hi = _summary(phi)
        for i in range(I):
            yield _record(t, "inflow", [0, i + 1], *(_summary(np.exp(
                state.mean[i, 0, 0] + np.sqrt(state.scale[i, 0, 0, 0]) * rng.standard_normal(gravity_samples)))),
                monitor.signal[i, 0])
            yield _record(t, "outflow", [i + 1, 0], *_summary(np.exp(
                state.mean[i, 1, 0] + np.sqrt(state.scale[i, 1, 0, 0]) * rng.standard_normal(gravity_samples))),
                monitor.signal[i, 1])
            for j in range(I):
                yield _record(t, "phi", [i + 1, j + 1], rate_mean[i, j], rate_lo[i, j], rate_hi[i, j],
                              monitor.signal[i, 2 + j])
        yield {"t": int(t), "quantity": "constraints", **gravity_constraints(g)}
        yield _record(t, "intensity", [], *_summary(g.intensity), False)
        for name, arr in (("origin", g.origin), ("destination", g.destination)):
            mean, lo, hi = _summary(arr)
            for i in range(I):
                yield _record(t, name, [i + 1], mean[i], lo[i], hi[i], False)
        mean, lo, hi = _summary(g.affinity)
        for i in range(I):
            for j in range(I):
                yield _record(t, "affinity", [i + 1, j + 1], mean[i, j], lo[i, j], hi[i, j], False)


def _record(t, quantity, nodes, mean, lo, hi, signal) -> dict:
    return {"t": int(t), "quantity": quantity, "nodes": list(nodes), "mean": float(mean),
            "lo95": float(lo), "hi95": float(hi), "signal": bool(signal)}
