"""Batch command-line front end: ``recouple fit|forecast|compare|netflow``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import dglm, scoring
from .config import RunConfig, load_config, parse_config
from .ddnm import filter_step, forecast_paths
from .errors import ConfigError, InputError, RecoupleError
from .netflow import LEVEL_F, FlowPanel, run_netflow
from .sgdlm import SideModel, forecast_paths_sgdlm, sgdlm_step

THREADS_ENV = "RECOUPLE_THREADS"

FIT_COLUMNS = ["record", "t", "series", "location", "spread", "dof", "mean", "variance", "log_score", "pit",
               "log_pred", "ess", "entropy", "flagged", "parents"]
FORECAST_COLUMNS = ["record", "t", "horizon", "series", "mean"]
COMPARE_COLUMNS = ["record", "t", "model", "log_lik", "log_score", "discounted", "probability"]
NETFLOW_COLUMNS = ["record", "t", "quantity", "nodes", "mean", "lo95", "hi95", "signal",
                   "origin_gm", "destination_gm", "affinity_row_gm", "affinity_col_gm"]


@dataclass(frozen=True)
class Panel:
    """Wide series panel: times ``(T,)``, outcomes ``(T, q)``, exogenous columns ``(T, n)``."""

    times: np.ndarray
    y: np.ndarray
    exog: np.ndarray
    digest: str


def _digest(path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise InputError(f"cannot read data {path}: {exc}") from None


def _parse_cell(value: str, row: int, column: str) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise InputError(f"row {row}, column {column!r}: not a number ({value!r})") from None
    if not np.isfinite(x):
        raise InputError(f"row {row}, column {column!r}: non-finite value; missing data is not supported")
    return x


def _check_times(times: np.ndarray) -> None:
    if times.size == 0:
        raise InputError("data file has no rows")
    d = np.diff(times)
    if np.any(d <= 0):
        r = int(np.argmax(d <= 0)) + 3
        raise InputError(f"row {r}: time stamps must be strictly increasing")
    if d.size and np.any(np.abs(d - d[0]) > 1e-9 * max(1.0, abs(d[0]))):
        r = int(np.argmax(np.abs(d - d[0]) > 1e-9 * max(1.0, abs(d[0])))) + 3
        raise InputError(f"row {r}: time stamps must be equally spaced")


def _read_rows(path, needed: Sequence[str]) -> tuple[list[str], list[dict]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            rows = list(reader)
    except OSError as exc:
        raise InputError(f"cannot read data {path}: {exc}") from None
    missing = [c for c in needed if c not in header]
    if missing:
        raise ConfigError(f"data columns {missing} named in the config are absent from {path}")
    return header, rows


def read_panel(path, cfg: RunConfig, check_times: bool = True) -> Panel:
    cols = [cfg.time_column, *cfg.series, *cfg.exog_columns]
    _, rows = _read_rows(path, cols)
    table = np.array([[_parse_cell(r[c], i + 2, c) for c in cols] for i, r in enumerate(rows)]).reshape(-1, len(cols))
    times = table[:, 0]
    if check_times:
        _check_times(times)
    q = len(cfg.series)
    return Panel(times, table[:, 1:1 + q], table[:, 1 + q:], _digest(path))


def read_flows(path, cfg: RunConfig) -> tuple[np.ndarray, FlowPanel, str]:
    cols = ["t", "from_node", "to_node", "count"]
    _, rows = _read_rows(path, cols)
    table = np.array([[_parse_cell(r[c], i + 2, c) for c in cols] for i, r in enumerate(rows)]).reshape(-1, 4)
    times = np.unique(table[:, 0])
    _check_times(times)
    table[:, 0] = np.searchsorted(times, table[:, 0])
    return times, FlowPanel.from_long(table, cfg.nodes), _digest(path)


def _num(x):
    if isinstance(x, np.ndarray) and x.ndim == 0:
        x = x.item()
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    return x


def _time(t: float):
    return int(t) if float(t).is_integer() else float(t)


# --- filtering drivers -------------------------------------------------------

def _filter_panel(cfg: RunConfig, panel: Panel, workers: int) -> Iterator[tuple[int, dict, list[dict], object]]:
    """Yield ``(row, step record, per-series records, final state)`` for each filtered row."""
    if cfg.model == "dglm-panel":
        yield from _filter_counts(cfg, panel)
        return
    structure = cfg.structure()
    models = cfg.series_models()
    L = cfg.max_lag
    hot = cfg.hotspot.build() if cfg.hotspot is not None else None
    side = SideModel.create(len(cfg.series), cfg.hotspot.side_discount) if hot is not None else None
    rng = np.random.default_rng(cfg.seed)
    for t in range(L, panel.y.shape[0]):
        history = panel.y[t - L:t] if L else None
        exog = panel.exog[t] if panel.exog.shape[1] else None
        if cfg.model == "ddnm":
            models, lp, fcs = filter_step(models, structure, panel.y[t], history=history, exog=exog, t=t,
                                          workers=workers)
            step = {"log_pred": float(np.sum(lp)), "ess": None, "entropy": None, "flagged": None}
        else:
            res = sgdlm_step(models, structure, panel.y[t], rng, cfg.importance_samples, history=history,
                             exog=exog, t=t, side=side, hotspot=hot, workers=workers)
            models, lp, fcs, side = res.models, res.series_log_pred, res.forecasts, res.side
            step = {"log_pred": res.log_pred, "ess": res.ess, "entropy": res.entropy, "flagged": res.flagged}
            structure = res.structure
        series = []
        for j, name in enumerate(cfg.series):
            fc = fcs[j]
            series.append({"series": name, "location": fc.location, "spread": fc.spread, "dof": fc.dof,
                           "log_score": lp[j], "pit": fc.cdf(panel.y[t, j]),
                           "parents": " ".join(cfg.series[h] for h in structure.parents[j])})
        yield t, step, series, (models, structure)


def _count_state(cfg: RunConfig, y0: np.ndarray) -> dglm.DglmState:
    q = y0.size
    mean = np.zeros((q, 2))
    mean[:, 0] = np.log1p(y0)
    return dglm.DglmState(mean, np.broadcast_to(np.diag([1.0, 0.01]), (q, 2, 2)).copy(),
                          dglm.local_linear_trend(cfg.delta))


def _filter_counts(cfg: RunConfig, panel: Panel):
    y = panel.y
    if np.any(y < 0) or np.any(y % 1):
        r, c = np.argwhere((y < 0) | (y % 1 != 0))[0]
        raise InputError(f"row {r + 2}, column {cfg.series[c]!r}: counts must be non-negative integers")
    state = _count_state(cfg, y[0])
    for t in range(y.shape[0]):
        prior = dglm.dglm_evolve(state, t)
        _, _, pair = dglm.dglm_predictive(prior, LEVEL_F)
        state, lp = dglm.dglm_update(prior, LEVEL_F, y[t])
        mean, var = dglm.nb_moments(pair)
        u = scoring.pit(pair, y[t], np.random.default_rng([cfg.seed, t]))
        series = [{"series": name, "mean": mean[j], "variance": var[j], "log_score": lp[j], "pit": u[j]}
                  for j, name in enumerate(cfg.series)]
        yield t, {"log_pred": float(np.sum(lp)), "ess": None, "entropy": None, "flagged": None}, series, state


# --- commands ------------------------------------------------------------------

def cmd_fit(cfg: RunConfig, panel: Panel, workers: int = 1) -> Iterator[dict]:
    for t, step, series, _ in _filter_panel(cfg, panel, workers):
        tt = _time(panel.times[t])
        for rec in series:
            yield {"record": "forecast", "t": tt, **rec}
        yield {"record": "step", "t": tt, **step}


def _future_exog(cfg: RunConfig, future_path, k: int) -> np.ndarray | None:
    if not cfg.exog_columns:
        return None
    if future_path is None:
        raise ConfigError("exogenous predictors are configured; pass their future values with --future")
    cols = cfg.exog_columns
    _, rows = _read_rows(future_path, cols)
    if len(rows) < k:
        raise InputError(f"--future has {len(rows)} rows, horizon needs {k}")
    return np.array([[_parse_cell(r[c], i + 2, c) for c in cols] for i, r in enumerate(rows[:k])])


def cmd_forecast(cfg: RunConfig, panel: Panel, workers: int = 1, future=None) -> Iterator[dict]:
    if cfg.model == "netflow":
        raise ConfigError("forecast supports ddnm, sgdlm and dglm-panel configs")
    k, N = cfg.horizon, cfg.samples
    final = None
    for _, _, _, final in _filter_panel(cfg, panel, workers):
        pass
    if final is None:
        raise InputError("not enough rows to filter past the largest lag")
    T = panel.y.shape[0]
    if cfg.model == "dglm-panel":
        state = final
        samples = np.stack([dglm.dglm_forecast(dglm.DglmState(state.mean[j], state.scale[j], state.spec), LEVEL_F,
                                               n_samples=N, rng=np.random.default_rng([cfg.seed, j]), horizon=k)
                            for j in range(len(cfg.series))], axis=-1)
    else:
        models, structure = final
        L = cfg.max_lag
        history = panel.y[T - L:] if L else None
        exog = _future_exog(cfg, future, k)
        sim = forecast_paths if cfg.model == "ddnm" else forecast_paths_sgdlm
        samples = sim(models, structure, k, N, seed=cfg.seed, history=history, exog=exog, t=T).samples
    qs = np.quantile(samples, cfg.quantiles, axis=0)
    step = panel.times[1] - panel.times[0] if T > 1 else 1.0
    for h in range(k):
        for j, name in enumerate(cfg.series):
            rec = {"record": "quantiles", "t": _time(panel.times[-1] + (h + 1) * step), "horizon": h + 1,
                   "series": name, "mean": float(samples[:, h, j].mean())}
            rec.update({f"q{p:g}": float(qs[i, h, j]) for i, p in enumerate(cfg.quantiles)})
            yield rec


def cmd_compare(cfgs: Sequence[RunConfig], names: Sequence[str], panels: Sequence[Panel], alpha: float,
                workers: int = 1) -> Iterator[dict]:
    if len(cfgs) < 2:
        raise ConfigError("compare needs at least two configs")
    if any(c.model == "netflow" for c in cfgs):
        raise ConfigError("compare supports series-panel configs only")
    if any(sorted(c.series) != sorted(cfgs[0].series) for c in cfgs):
        raise ConfigError("configs must model the same set of series")
    start = max(0 if c.model == "dglm-panel" else c.max_lag for c in cfgs)
    # configs with different lag orders are scored on their common rows only
    streams = [(r for r in _filter_panel(c, p, workers) if r[0] >= start) for c, p in zip(cfgs, panels)]
    ledger = scoring.ScoreLedger.create(list(names), alpha)
    times = panels[0].times
    for rows in zip(*streams):
        t = rows[0][0]
        ll = np.array([r[1]["log_pred"] for r in rows])
        ledger = scoring.accumulate(ledger, ll)
        for i, name in enumerate(names):
            yield {"record": "score", "t": _time(times[t]), "model": name, "log_lik": ll[i],
                   "log_score": ledger.log_score[i], "discounted": ledger.discounted[i],
                   "probability": ledger.probabilities[i]}


def cmd_netflow(cfg: RunConfig, times: np.ndarray, panel: FlowPanel) -> Iterator[dict]:
    if cfg.model != "netflow":
        raise ConfigError("netflow needs a config with model 'netflow'")
    for rec in run_netflow(panel, cfg.delta, cfg.monitor.build(), cfg.gravity_samples, cfg.seed):
        rec = dict(rec)
        rec["t"] = _time(times[rec["t"]])
        if "nodes" in rec:
            rec["nodes"] = "-".join(str(n) for n in rec["nodes"])
        yield {"record": "netflow", **rec}


# --- output --------------------------------------------------------------------

def _csv_value(v):
    v = _num(v)
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def write_records(records: Iterable[dict], stamp: dict, columns: Sequence[str], fmt: str, out) -> int:
    n = 0
    if fmt == "jsonl":
        for rec in records:
            out.write(json.dumps({**stamp, **{k: _num(v) for k, v in rec.items()}}, allow_nan=True) + "\n")
            n += 1
        return n
    header = [*stamp, *columns]
    writer = csv.DictWriter(out, header, lineterminator="\r\n")
    writer.writeheader()
    for rec in records:
        writer.writerow({k: _csv_value(v) for k, v in {**stamp, **rec}.items()})
        n += 1
    return n


def _stamp(command: str, config_hash: str, digests: Sequence[str], seed: int) -> dict:
    blob = "|".join([command, config_hash, *digests, str(seed)]).encode()
    return {"run_id": hashlib.sha256(blob).hexdigest()[:16], "seed": seed, "config_hash": config_hash}


def _workers(flag: int | None) -> int:
    if flag is not None:
        value, source = flag, "--workers"
    elif os.environ.get(THREADS_ENV):
        source = THREADS_ENV
        try:
            value = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    else:
        return 1
    if value < 1:
        raise ConfigError(f"{source} must be >= 1")
    return value


def _override(cfg: RunConfig, args) -> RunConfig:
    upd = {k: v for k, v in (("horizon", getattr(args, "horizon", None)), ("samples", getattr(args, "samples", None)),
                             ("seed", args.seed), ("alpha", getattr(args, "alpha", None))) if v is not None}
    return parse_config({**cfg.model_dump(), **upd}) if upd else cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recouple", description="Decoupled multivariate Bayesian forecasting runs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, multi=False):
        if multi:
            sp.add_argument("--config", action="append", required=True, help="JSON run config (repeat per model)")
        else:
            sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--data", required=True, help="CSV data file")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", help="output file (default stdout)")
        sp.add_argument("--format", choices=("csv", "jsonl"), default="csv")
        sp.add_argument("--workers", type=int, help=f"worker threads (else ${THREADS_ENV}, else 1)")

    common(sub.add_parser("fit", help="sequential one-step forecasts, PITs and diagnostics"))
    fc = sub.add_parser("forecast", help="k-step joint path quantiles after filtering")
    common(fc)
    fc.add_argument("--horizon", type=int)
    fc.add_argument("--samples", type=int)
    fc.add_argument("--future", help="CSV of future exogenous predictors")
    cp = sub.add_parser("compare", help="power-discounted model probabilities")
    common(cp, multi=True)
    cp.add_argument("--alpha", type=float)
    common(sub.add_parser("netflow", help="flow monitoring and gravity decomposition"))
    return p


def run(argv: Sequence[str] | None = None, stdout=None) -> int:
    args = build_parser().parse_args(argv)
    stdout = stdout or sys.stdout
    workers = _workers(args.workers)
    if args.command == "compare":
        cfgs = [_override(load_config(path), args) for path in args.config]
        alpha = args.alpha if args.alpha is not None else cfgs[0].alpha
        names, seen = [], {}
        for path, c in zip(args.config, cfgs):
            base = c.name or Path(path).stem
            seen[base] = seen.get(base, 0) + 1
            names.append(base if seen[base] == 1 else f"{base}#{seen[base]}")
        panels = [read_panel(args.data, c) for c in cfgs]
        chash = hashlib.sha256("|".join(c.config_hash() for c in cfgs).encode()).hexdigest()
        stamp = _stamp("compare", chash, [panels[0].digest], cfgs[0].seed)
        records, columns = cmd_compare(cfgs, names, panels, alpha, workers), COMPARE_COLUMNS
    else:
        cfg = _override(load_config(args.config), args)
        if args.command == "netflow" or (args.command == "fit" and cfg.model == "netflow"):
            times, flows, digest = read_flows(args.data, cfg)
            records, columns = cmd_netflow(cfg, times, flows), NETFLOW_COLUMNS
        else:
            panel = read_panel(args.data, cfg)
            digest = panel.digest
            if args.command == "fit":
                records, columns = cmd_fit(cfg, panel, workers), FIT_COLUMNS
            else:
                records = cmd_forecast(cfg, panel, workers, args.future)
                columns = FORECAST_COLUMNS + [f"q{p:g}" for p in cfg.quantiles]
        stamp = _stamp(args.command, cfg.config_hash(), [digest], cfg.seed)
    # render fully before touching the output so failures leave no partial file
    buf = io.StringIO()
    write_records(records, stamp, columns, args.format, buf)
    if args.out:
        Path(args.out).write_text(buf.getvalue(), newline="")
    else:
        stdout.write(buf.getvalue())
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except RecoupleError as exc:
        print(f"recouple: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
