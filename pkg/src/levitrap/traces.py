"""Data carriers shared between modules: sampled series and fit results."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .physics import Estimate


class UnitError(ValueError):
    """Two series or a series and an operation disagree on units."""


class FitError(RuntimeError):
    """A fit did not converge or is degenerate.

    ``diagnostics`` holds whatever the estimator knew at the point of failure
    (last iterate, cost, message) so that scenario runs can log it.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


@dataclass
class TimeTrace:
    """Uniformly sampled scalar series.

    ``valid`` marks samples that may be read by estimators; stroboscopic
    acquisition sets it to ``False`` while the particle is not illuminated.
    """

    values: np.ndarray
    dt: float
    unit: str
    t0: float = 0.0
    name: str = ""
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise ValueError("TimeTrace values must be one-dimensional")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise ValueError("valid mask must match values")

    def __len__(self):
        return self.values.size

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.values.size)

    @property
    def duration(self):
        return self.values.size * self.dt

    @property
    def sample_rate(self):
        return 1.0 / self.dt

    def mask(self):
        if self.valid is None:
            return np.ones(self.values.size, dtype=bool)
        return self.valid

    def require_unit(self, unit):
        if self.unit != unit:
            raise UnitError(f"expected a trace in {unit!r}, got {self.unit!r}")
        return self

    def window(self, start, stop):
        """Samples with ``start <= t < stop`` as a new trace."""
        t = self.times
        sel = np.flatnonzero((t >= start - 1e-9 * self.dt) & (t < stop - 1e-9 * self.dt))
        if sel.size == 0:
            raise ValueError(f"window [{start}, {stop}) holds no samples")
        valid = None if self.valid is None else self.valid[sel]
        return TimeTrace(self.values[sel], self.dt, self.unit, float(t[sel[0]]),
                         self.name, valid)

    def with_values(self, values, unit=None, name=None):
        return TimeTrace(values, self.dt, unit or self.unit, self.t0,
                         name if name is not None else self.name, self.valid)


@dataclass
class FitResult:
    """Parameter estimates with 1 sigma and residual diagnostics.

    ``residuals`` are in the space the fit was done in (log space for
    ring-down fits). ``measurement_variance`` holds the per-point variance
    assumed by a weighted fit, when there is one.
    """

    params: dict
    covariance: np.ndarray
    residuals: np.ndarray
    model: str = ""
    measurement_variance: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name) -> Estimate:
        return self.params[name]

    def value(self, name):
        return self.params[name].value

    def sigma(self, name):
        return self.params[name].sigma

    @property
    def n_obs(self):
        return int(np.size(self.residuals))

    def to_dict(self):
        out = {
            "model": self.model,
            "parameters": [
                {"name": k, "value": float(v.value), "sigma": float(v.sigma)}
                for k, v in self.params.items()
            ],
            "covariance": np.asarray(self.covariance, dtype=float).tolist(),
            "n_obs": self.n_obs,
        }
        for k, v in self.extra.items():
            out[k] = _jsonable(v)
        return out

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data):
        params = {p["name"]: Estimate(p["value"], p["sigma"]) for p in data["parameters"]}
        extra = {k: v for k, v in data.items()
                 if k not in ("model", "parameters", "covariance", "n_obs")}
        return cls(params, np.asarray(data["covariance"], dtype=float),
                   np.zeros(data.get("n_obs", 0)), data.get("model", ""), None, extra)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v
