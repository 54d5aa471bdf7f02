"""Parametric longitudinal shower model for an absorber/scintillator stack.

Photons convert after an exponentially distributed depth, then deposit energy
following a Gamma-shaped longitudinal profile in radiation-length units. Only
energy that lands in scintillator segments is recorded; whatever lies beyond
the last segment leaks out.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import gammaln

ALLOWED_FEATURES = (2, 4, 6)


@dataclass(frozen=True)
class ShowerModel:
    x0_absorber: float = 0.5612      # cm, Pb
    x0_scintillator: float = 0.8904  # cm, PbWO4
    critical_energy: float = 0.0096  # GeV
    profile_b: float = 0.5
    photon_offset: float = 0.5
    conversion_mean: float = 9.0 / 7.0  # radiation lengths
    stochastic_term: float = 0.10
    constant_term: float = 0.01
    smear: bool = True

    def __post_init__(self):
        for name in ("x0_absorber", "x0_scintillator", "critical_energy", "profile_b",
                     "photon_offset", "conversion_mean", "stochastic_term", "constant_term"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    def shape_parameter(self, energy):
        """Gamma shape ``a`` of the longitudinal profile at ``energy`` (GeV)."""
        return 1.0 + self.profile_b * (np.log(np.asarray(energy) / self.critical_energy)
                                       + self.photon_offset)

    def relative_resolution(self, energy):
        e = np.asarray(energy, dtype=float)
        with np.errstate(divide="ignore"):
            return np.hypot(self.stochastic_term / np.sqrt(e), self.constant_term)


@dataclass
class EventBatch:
    energies: np.ndarray   # (M,) GeV
    deposits: np.ndarray   # (M, V) GeV per scintillator

    def __len__(self) -> int:
        return len(self.energies)

    @property
    def n_segments(self) -> int:
        return self.deposits.shape[1]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["event", "energy_gev"] + [f"dep_{j + 1}" for j in range(self.n_segments)])
            for i, (e, dep) in enumerate(zip(self.energies, self.deposits)):
                w.writerow([i, repr(float(e))] + [repr(float(d)) for d in dep])


def validate_design(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.size not in ALLOWED_FEATURES:
        raise ValueError(f"design must have 2, 4 or 6 thicknesses, got shape {theta.shape}")
    if not np.isfinite(theta).all() or (theta < 0).any():
        raise ValueError(f"thicknesses must be finite and >= 0, got {theta}")
    return theta


def sample_energies(range_min: float, range_max: float, n: int, seed) -> np.ndarray:
    if not 0 < range_min < range_max:
        raise ValueError(f"invalid energy range [{range_min}, {range_max}]")
    if n < 1:
        raise ValueError("need at least one event")
    return np.random.default_rng(seed).uniform(range_min, range_max, size=n)


# ------------------------------------------------------- incomplete gamma

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 1000


def _gamma_series(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    term = 1.0 / a
    total = term.copy()
    ap = a.copy()
    active = np.ones(a.shape, dtype=bool)
    for _ in range(_MAX_ITER):
        ap = ap + 1.0
        term = np.where(active, term * x / ap, 0.0)
        total = total + term
        active = np.abs(term) > np.abs(total) * _EPS
        if not active.any():
            break
    return total * np.exp(-x + a * np.log(x) - gammaln(a))


def _gamma_cf_upper(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    b = x + 1.0 - a
    c = np.full(a.shape, 1.0 / _TINY)
    d = 1.0 / b
    h = d.copy()
    active = np.ones(a.shape, dtype=bool)
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < _TINY, _TINY, d)
        c = b + an / c
        c = np.where(np.abs(c) < _TINY, _TINY, c)
        d = 1.0 / d
        delta = np.where(active, d * c, 1.0)
        h = h * delta
        active = np.abs(delta - 1.0) > _EPS
        if not active.any():
            break
    return np.exp(-x + a * np.log(x) - gammaln(a)) * h


def regularized_lower_gamma(a, x) -> np.ndarray | float:
    """P(a, x): series for x < a + 1, continued fraction otherwise."""
    a_arr, x_arr = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(x, dtype=float))
    if (a_arr <= 0).any() or (x_arr < 0).any() or np.isnan(a_arr).any() or np.isnan(x_arr).any():
        raise ValueError("regularized_lower_gamma needs a > 0 and x >= 0")
    out = np.zeros(a_arr.shape)
    inf = np.isinf(x_arr)
    out[inf] = 1.0
    series = (x_arr > 0) & (x_arr < a_arr + 1.0)
    cf = ~inf & (x_arr >= a_arr + 1.0)
    if series.any():
        out[series] = _gamma_series(a_arr[series], x_arr[series])
    if cf.any():
        out[cf] = 1.0 - _gamma_cf_upper(a_arr[cf], x_arr[cf])
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


# ------------------------------------------------------------- simulation

def segment_edges(theta: np.ndarray, model: ShowerModel) -> np.ndarray:
    """Cumulative depth (radiation lengths) at the end of each segment."""
    x0 = np.where(np.arange(theta.size) % 2 == 0, model.x0_absorber, model.x0_scintillator)
    return np.cumsum(theta / x0)


def ideal_deposits(theta, energies, start_depth, model: ShowerModel = ShowerModel()) -> np.ndarray:
    """Noise-free scintillator deposits for given conversion depths; shape (M, V)."""
    theta = validate_design(theta)
    energies = np.asarray(energies, dtype=float)
    t0 = np.broadcast_to(np.asarray(start_depth, dtype=float), energies.shape)
    edges = segment_edges(theta, model)
    starts = edges[0::2]
    ends = edges[1::2]
    a = model.shape_parameter(energies)[:, None]
    b = model.profile_b
    lo = b * np.maximum(starts[None, :] - t0[:, None], 0.0)
    hi = b * np.maximum(ends[None, :] - t0[:, None], 0.0)
    a_full = np.broadcast_to(a, lo.shape)
    frac = regularized_lower_gamma(a_full, hi) - regularized_lower_gamma(a_full, lo)
    return energies[:, None] * np.maximum(frac, 0.0)


def simulate(theta, energies, model: ShowerModel = ShowerModel(), seed=0) -> EventBatch:
    """Stochastic detector response ``y = D(x, theta)``; deterministic in ``seed``."""
    theta = validate_design(theta)
    energies = np.asarray(energies, dtype=float)
    if (energies <= 0).any():
        raise ValueError("energies must be positive")
    rng = np.random.default_rng(seed)
    t0 = rng.exponential(model.conversion_mean, size=energies.shape)
    noise = rng.standard_normal(energies.shape)
    deposits = ideal_deposits(theta, energies, t0, model)
    if model.smear:
        visible = deposits.sum(axis=1)
        factor = np.ones_like(visible)
        hit = visible > 0
        rel = model.relative_resolution(visible[hit])
        # common scale per event, clamped so the event never exceeds its energy
        factor[hit] = np.clip(1.0 + noise[hit] * rel, 0.0, energies[hit] / visible[hit])
        deposits = deposits * factor[:, None]
    return EventBatch(energies=energies.copy(), deposits=np.maximum(deposits, 0.0))


@dataclass
class CandidateSet:
    """One iteration's perturbed designs with their simulated events."""

    thetas: np.ndarray               # (K, F)
    batches: list[EventBatch]
    deltas: np.ndarray | None = None  # (K,) for MI, (K, M) for reconstruction

    def __len__(self) -> int:
        return len(self.thetas)

    def energies(self) -> np.ndarray:
        return np.stack([b.energies for b in self.batches])

    def deposits(self) -> np.ndarray:
        return np.stack([b.deposits for b in self.batches])
