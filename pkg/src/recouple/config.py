"""Versioned JSON run configuration."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .ddnm import ParentalStructure, SeriesModel, make_series_model
from .dlm import Regressors
from .errors import ConfigError
from .netflow import MonitorConfig
from .sgdlm import HotspotConfig

SCHEMA_VERSION = 1
DEFAULT_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PriorBlock(_Strict):
    mean: float = 0.0
    scale: float = Field(1.0, gt=0)
    dof: float = Field(1.0, gt=0)
    point_volatility: float = Field(1.0, gt=0)


class SeriesBlock(_Strict):
    """Per-series settings; fields left out fall back to ``defaults``."""

    parents: Optional[list[str]] = None
    intercept: Optional[bool] = None
    lags: Optional[list[tuple[str, int]]] = None
    exog: Optional[list[str]] = None
    delta_own: Optional[float] = Field(None, gt=0, le=1)
    delta_parents: Optional[float] = Field(None, gt=0, le=1)
    beta: Optional[float] = Field(None, gt=0, le=1)
    prior: Optional[PriorBlock] = None


class MonitorBlock(_Strict):
    k: float = Field(MonitorConfig.k, gt=1)
    log_tau: float = Field(float(np.log(MonitorConfig.tau)), gt=0)
    l_min: int = Field(MonitorConfig.l_min, ge=1)
    delta_exceptional: float = Field(MonitorConfig.delta_exceptional, gt=0, le=1)

    def build(self) -> MonitorConfig:
        return MonitorConfig(self.k, float(np.exp(self.log_tau)), self.l_min, self.delta_exceptional)


class HotspotBlock(_Strict):
    budget: int = Field(HotspotConfig.budget, ge=0)
    warmup_steps: int = Field(HotspotConfig.warmup_steps, ge=0)
    cooldown_steps: int = Field(HotspotConfig.cooldown_steps, ge=0)
    tau_promote: float = HotspotConfig.tau_promote
    tau_demote: float = HotspotConfig.tau_demote
    cooldown_decay: float = Field(HotspotConfig.cooldown_decay, ge=0, le=1)
    entry_scale: float = Field(HotspotConfig.entry_scale, gt=0)
    side_discount: float = Field(0.99, gt=0, le=1)

    def build(self) -> HotspotConfig:
        return HotspotConfig(self.budget, self.warmup_steps, self.cooldown_steps, self.tau_promote,
                             self.tau_demote, self.cooldown_decay, self.entry_scale)


_DEFAULTS = SeriesBlock(parents=[], intercept=True, lags=[], exog=[], delta_own=0.99, delta_parents=0.99,
                        beta=0.98, prior=PriorBlock())


class RunConfig(_Strict):
    version: Literal[1]
    model: Literal["ddnm", "sgdlm", "dglm-panel", "netflow"]
    name: Optional[str] = None
    time_column: str = "t"
    series: list[str] = []
    order: Optional[list[str]] = None
    defaults: SeriesBlock = _DEFAULTS
    specs: dict[str, SeriesBlock] = {}
    samples: int = Field(5000, ge=1)
    horizon: int = Field(12, ge=1)
    alpha: float = Field(0.99, gt=0, le=1)
    seed: int = Field(0, ge=0)
    quantiles: list[float] = list(DEFAULT_QUANTILES)
    importance_samples: int = Field(1000, ge=1)
    hotspot: Optional[HotspotBlock] = None
    monitor: MonitorBlock = MonitorBlock()
    delta: float = Field(0.98, gt=0, le=1)
    nodes: Optional[int] = Field(None, ge=1)
    gravity_samples: int = Field(200, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.model != "netflow":
            if not self.series:
                raise ValueError("'series' must list at least one column")
            if len(set(self.series)) != len(self.series):
                raise ValueError("duplicate series names")
            if self.time_column in self.series:
                raise ValueError("time column cannot also be a series")
        unknown = set(self.specs) - set(self.series)
        if unknown:
            raise ValueError(f"specs for unknown series {sorted(unknown)}")
        names = set(self.series)
        for j in self.series:
            blk = self.block(j)
            bad = [p for p in blk.parents if p not in names or p == j]
            if bad:
                raise ValueError(f"series {j!r}: invalid parents {bad}")
            bad = [s for s, lag in blk.lags if s not in names or lag < 1]
            if bad:
                raise ValueError(f"series {j!r}: invalid lag terms on {bad}")
        if self.order is not None:
            if self.model != "ddnm":
                raise ValueError("'order' applies to ddnm only")
            if sorted(self.order) != sorted(self.series):
                raise ValueError("'order' must be a permutation of 'series'")
        if self.hotspot is not None and self.model != "sgdlm":
            raise ValueError("'hotspot' applies to sgdlm only")
        if any(not 0 < p < 1 for p in self.quantiles) or list(self.quantiles) != sorted(set(self.quantiles)):
            raise ValueError("quantiles must be increasing and inside (0, 1)")
        return self

    def block(self, name: str) -> SeriesBlock:
        own = self.specs.get(name, SeriesBlock())
        merged = {k: (v if v is not None else getattr(_DEFAULTS, k)) for k, v in self.defaults}
        merged.update({k: v for k, v in own if v is not None})
        return SeriesBlock(**merged)

    @property
    def exog_columns(self) -> list[str]:
        cols: list[str] = []
        for j in self.series:
            cols += [c for c in self.block(j).exog if c not in cols]
        return cols

    @property
    def max_lag(self) -> int:
        return max((lag for j in self.series for _, lag in self.block(j).lags), default=0)

    def config_hash(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def structure(self) -> ParentalStructure:
        idx = {s: i for i, s in enumerate(self.series)}
        parents = tuple(tuple(idx[p] for p in self.block(j).parents) for j in self.series)
        if self.model == "sgdlm":
            return ParentalStructure(parents, mode="sgdlm")
        order = None if self.order is None else tuple(idx[s] for s in self.order)
        return ParentalStructure(parents, order=order)

    def series_models(self) -> list[SeriesModel]:
        idx = {s: i for i, s in enumerate(self.series)}
        exog = {c: i for i, c in enumerate(self.exog_columns)}
        out = []
        for j in self.series:
            b = self.block(j)
            reg = Regressors(b.intercept, tuple((idx[s], lag) for s, lag in b.lags), tuple(exog[c] for c in b.exog))
            out.append(make_series_model(reg, len(b.parents), delta_own=b.delta_own, delta_parents=b.delta_parents,
                                         beta=b.beta, mean=b.prior.mean, scale=b.prior.scale, dof=b.prior.dof,
                                         point_volatility=b.prior.point_volatility))
        return out


def parse_config(obj) -> RunConfig:
    try:
        return RunConfig.model_validate(obj)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def load_config(path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(obj)
