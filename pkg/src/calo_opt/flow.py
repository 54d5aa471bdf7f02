"""Conditional one-dimensional normalising flow over the log of a per-event loss.

The map from ``w`` to a standard-normal latent ``u`` is a conditioner-driven
piecewise-linear CDF on ``[w_min, w_max]`` composed with the normal quantile.
A small probability mass is reserved for each side and spent on linear tails
in latent space, which keeps the map bijective on the whole real line and
continuously differentiable at the range edges. Samples of the loss itself are
``exp(w)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from . import autodiff as ad
from .autodiff import ParamSet, ShapeError, Tensor
from .nn import HIDDEN_WIDTH, AdamState, LrSchedule, MlpSpec, Standardizer, hidden_widths, \
    mlp_forward, mlp_init, train

_MIX = 1e-6          # uniform share mixed into the bin masses so none underflows
_LOG_FLOOR = 1e-30   # losses are clipped here before taking the log
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class FlowConfig:
    n_bins: int = 32
    tail_mass: float = 1e-3
    layers: int = 3
    width: int = HIDDEN_WIDTH
    stages: tuple[tuple[float, int], ...] = ((3e-4, 200), (1e-4, 200), (1e-5, 200))
    batch_size: int | None = 128
    range_mads: float = 3.0

    def schedule(self) -> LrSchedule:
        return LrSchedule.staged(self.stages)


@dataclass(frozen=True)
class FlowSpec:
    w_min: float
    w_max: float
    n_bins: int = 32
    tail_mass: float = 1e-3

    def __post_init__(self):
        if not (np.isfinite(self.w_min) and np.isfinite(self.w_max) and self.w_max > self.w_min):
            raise ValueError(f"invalid support [{self.w_min}, {self.w_max}]")
        if self.n_bins < 2:
            raise ValueError("need at least two bins")
        if not 0 < self.tail_mass < 0.5:
            raise ValueError("tail mass must lie in (0, 0.5)")

    @classmethod
    def from_samples(cls, w, n_bins: int = 32, tail_mass: float = 1e-3, mads: float = 3.0) -> FlowSpec:
        """Support spanning the sample range padded by ``mads`` median absolute deviations."""
        w = np.asarray(w, dtype=float)
        if w.size == 0 or not np.isfinite(w).all():
            raise ValueError("need finite samples to size the flow support")
        mad = float(np.median(np.abs(w - np.median(w))))
        pad = max(mads * mad, 0.5)
        return cls(float(w.min()) - pad, float(w.max()) + pad, n_bins, tail_mass)

    @property
    def bin_width(self) -> float:
        return (self.w_max - self.w_min) / self.n_bins

    @property
    def u_lo(self) -> float:
        return float(ndtri(self.tail_mass))

    @property
    def u_hi(self) -> float:
        return float(ndtri(1.0 - self.tail_mass))

    def _edge_density(self) -> float:
        # standard normal pdf at the latent edges (symmetric)
        return float(np.exp(-0.5 * self.u_lo ** 2 - 0.5 * _LOG_2PI))


# --------------------------------------------------------------- transform

def _column(t: Tensor, index: np.ndarray) -> Tensor:
    return ad.reshape(ad.gather(t, index[:, None], axis=1), (len(index),))


def _edge_slopes(spec: FlowSpec, q: Tensor) -> tuple[Tensor, Tensor]:
    scale = (1.0 - 2.0 * spec.tail_mass) / (spec.bin_width * spec._edge_density())
    n = q.shape[0]
    lo = ad.affine(_column(q, np.zeros(n, dtype=np.intp)), scale)
    hi = ad.affine(_column(q, np.full(n, spec.n_bins - 1, dtype=np.intp)), scale)
    return lo, hi


def transform(spec: FlowSpec, q: Tensor, w) -> tuple[Tensor, Tensor]:
    """Latent ``u`` and ``log|du/dw|`` for bin masses ``q`` (N, bins) at points ``w`` (N,)."""
    w = np.asarray(w, dtype=float)
    lam, h = spec.tail_mass, spec.bin_width
    below, above = w < spec.w_min, w > spec.w_max
    pos = (np.clip(w, spec.w_min, spec.w_max) - spec.w_min) / h
    idx = np.clip(np.floor(pos), 0, spec.n_bins - 1).astype(np.intp)
    frac = pos - idx
    q_i = _column(q, idx)
    c_i = ad.sub(_column(ad.cumsum(q, axis=1), idx), q_i)
    s = ad.affine(ad.add(c_i, ad.mul(q_i, frac)), 1.0 - 2.0 * lam, lam)
    u_mid = ad.ndtri(s)
    logdet_mid = ad.sub(ad.log(ad.affine(q_i, (1.0 - 2.0 * lam) / h)), ad.normal_logpdf(u_mid))
    if not (below.any() or above.any()):
        return u_mid, logdet_mid
    k_lo, k_hi = _edge_slopes(spec, q)
    u_below = ad.affine(ad.mul(k_lo, w - spec.w_min), 1.0, spec.u_lo)
    u_above = ad.affine(ad.mul(k_hi, w - spec.w_max), 1.0, spec.u_hi)
    u = ad.where(below, u_below, ad.where(above, u_above, u_mid))
    logdet = ad.where(below, ad.log(k_lo), ad.where(above, ad.log(k_hi), logdet_mid))
    return u, logdet


def inverse_transform(spec: FlowSpec, q: Tensor, u) -> Tensor:
    """``w`` for latent points ``u`` (N,); differentiable with respect to ``q``."""
    u = np.asarray(u, dtype=float)
    lam, h = spec.tail_mass, spec.bin_width
    below, above = u < spec.u_lo, u > spec.u_hi
    level = np.clip((ndtr(u) - lam) / (1.0 - 2.0 * lam), 0.0, 1.0)
    cum = np.cumsum(q.data, axis=1)
    idx = np.clip((cum < level[:, None]).sum(axis=1), 0, spec.n_bins - 1).astype(np.intp)
    q_i = _column(q, idx)
    c_i = ad.sub(_column(ad.cumsum(q, axis=1), idx), q_i)
    within = ad.div(ad.sub(level, c_i), q_i)
    w_mid = ad.affine(ad.add(within, idx.astype(float)), h, spec.w_min)
    if not (below.any() or above.any()):
        return w_mid
    k_lo, k_hi = _edge_slopes(spec, q)
    w_below = ad.affine(ad.div(u - spec.u_lo, k_lo), 1.0, spec.w_min)
    w_above = ad.affine(ad.div(u - spec.u_hi, k_hi), 1.0, spec.w_max)
    return ad.where(below, w_below, ad.where(above, w_above, w_mid))


def nll_from_scores(spec: FlowSpec, scores: Tensor, w) -> Tensor:
    """Per-row negative log-likelihood straight from conditioner scores.

    Numerically the same as going through ``transform`` but fused into one
    node; training spends most of its time here.
    """
    scores = ad.as_tensor(scores)
    w = np.asarray(w, dtype=float)
    n, nb = scores.shape
    lam, h = spec.tail_mass, spec.bin_width
    s = scores.data - scores.data.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    q = (1.0 - _MIX) * p + _MIX / nb
    below, above = w < spec.w_min, w > spec.w_max
    pos = (np.clip(w, spec.w_min, spec.w_max) - spec.w_min) / h
    col = np.clip(np.floor(pos), 0, nb - 1).astype(np.intp)
    col[below] = 0
    col[above] = nb - 1
    rows = np.arange(n)
    q_c = q[rows, col]
    nll = np.log(h / (1.0 - 2.0 * lam)) - np.log(q_c)
    dq = -1.0 / q_c
    tails = below | above
    if tails.any():
        c = (1.0 - 2.0 * lam) / (h * spec._edge_density())
        kappa = c * q_c[tails]
        dist = np.where(below, w - spec.w_min, w - spec.w_max)[tails]
        u = np.where(below[tails], spec.u_lo, spec.u_hi) + kappa * dist
        nll[tails] = 0.5 * u * u + 0.5 * _LOG_2PI - np.log(kappa)
        dq[tails] = (u * dist - 1.0 / kappa) * c

    def vjp(g):
        gp = np.zeros((n, nb))
        gp[rows, col] = (1.0 - _MIX) * g * dq
        return [p * (gp - (gp * p).sum(axis=1, keepdims=True))]

    return ad.primitive(nll, [scores], vjp, "flow_nll")


def bin_masses(scores: Tensor) -> Tensor:
    n = scores.shape[-1]
    return ad.affine(ad.softmax(scores), 1.0 - _MIX, _MIX / n)


# ------------------------------------------------------------------- model

@dataclass
class FlowModel:
    spec: FlowSpec
    conditioner: MlpSpec
    params: ParamSet
    conditions: Standardizer
    losses: list[float] = field(default_factory=list, repr=False)

    def masses(self, cond) -> Tensor:
        c = cond if isinstance(cond, Tensor) else self.conditions.apply(_as2d(cond))
        return bin_masses(mlp_forward(self.params, c, self.conditioner))

    @classmethod
    def create(cls, spec: FlowSpec, cond_dim: int, config: FlowConfig = FlowConfig(), seed: int = 0,
               conditions: Standardizer | None = None) -> FlowModel:
        conditioner = MlpSpec(hidden_widths(cond_dim, spec.n_bins, config.layers, config.width), seed=seed)
        if conditions is None:
            conditions = Standardizer(np.zeros(cond_dim), np.ones(cond_dim))
        return cls(spec, conditioner, mlp_init(conditioner), conditions)


def _as2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def flow_forward(model: FlowModel, w, cond) -> tuple[np.ndarray, np.ndarray]:
    u, logdet = transform(model.spec, model.masses(cond), w)
    return u.data.copy(), logdet.data.copy()


def flow_inverse(model: FlowModel, u, cond) -> np.ndarray:
    return inverse_transform(model.spec, model.masses(cond), u).data.copy()


def nll_via_transform(spec: FlowSpec, q: Tensor, w) -> Tensor:
    u, logdet = transform(spec, q, w)
    return ad.sub(ad.neg(ad.normal_logpdf(u)), logdet)


def flow_log_density(model: FlowModel, w, cond) -> np.ndarray:
    c = model.conditions.apply(_as2d(cond))
    return -nll_from_scores(model.spec, mlp_forward(model.params, c, model.conditioner), w).data


def flow_nll(model: FlowModel, w, cond) -> float:
    """Mean negative log-likelihood of ``w`` under the conditional density."""
    return float(np.mean(-flow_log_density(model, w, cond)))


def log_loss(delta) -> np.ndarray:
    return np.log(np.maximum(np.asarray(delta, dtype=float), _LOG_FLOOR))


def train_flow(w, cond, warm_start: FlowModel | None = None, config: FlowConfig = FlowConfig(),
               seed: int = 0, freeze: bool = True) -> FlowModel:
    """Maximum-likelihood fit of the conditional density of ``w`` given ``cond``.

    With a warm start and ``freeze``, the support and the conditioning scaler
    stay those of the warm-start model.
    """
    w = np.asarray(w, dtype=float)
    cond = _as2d(cond)
    if len(w) != len(cond):
        raise ShapeError(f"{len(w)} targets but {len(cond)} condition rows")
    if warm_start is not None:
        if warm_start.conditioner.widths[0] != cond.shape[1]:
            raise ShapeError("warm-start conditioner expects a different condition width")
        if freeze:
            model = FlowModel(warm_start.spec, warm_start.conditioner, warm_start.params.copy(),
                              warm_start.conditions)
        else:
            spec = FlowSpec.from_samples(w, config.n_bins, config.tail_mass, config.range_mads)
            model = FlowModel(spec, warm_start.conditioner, warm_start.params.copy(), Standardizer.fit(cond))
    else:
        spec = FlowSpec.from_samples(w, config.n_bins, config.tail_mass, config.range_mads)
        model = FlowModel.create(spec, cond.shape[1], config, seed, Standardizer.fit(cond))
    c = model.conditions.apply(cond)
    spec, cspec = model.spec, model.conditioner

    def loss(params, wb, cb):
        return ad.mean(nll_from_scores(spec, mlp_forward(params, cb, cspec), wb))

    result = train(model.params, loss, [w, c], config.schedule(), batch_size=config.batch_size,
                   seed=seed, state=AdamState())
    model.losses = result.losses
    return model


def flow_conditions(energies, theta) -> np.ndarray:
    energies = np.asarray(energies, dtype=float)
    theta = np.asarray(theta, dtype=float)
    return np.hstack([energies[:, None], np.broadcast_to(theta, (len(energies), theta.size))])


def sample_loss(model: FlowModel, z, energies, theta) -> np.ndarray:
    """Surrogate per-event losses ``exp(w)`` for latents ``z`` at design ``theta``."""
    return np.exp(flow_inverse(model, z, flow_conditions(energies, theta)))


def surrogate_value_and_grad(model: FlowModel, energies, theta, z) -> tuple[float, np.ndarray]:
    """Mean surrogate loss over events at ``theta`` and its gradient in ``theta``.

    ``z`` is held fixed so the estimate is a smooth function of the design.
    """
    energies = np.asarray(energies, dtype=float)
    z = np.asarray(z, dtype=float)
    if energies.shape != z.shape:
        raise ShapeError(f"energies {energies.shape} and latents {z.shape} differ")
    # latents beyond the tail edges would probe a region the model never saw
    z = np.clip(z, model.spec.u_lo, model.spec.u_hi)
    theta_t = ad.Tensor(np.asarray(theta, dtype=float), requires_grad=True, name="theta")
    mu, sd = model.conditions.mean, model.conditions.std
    x_part = ((energies - mu[0]) / sd[0])[:, None]
    th = ad.div(ad.sub(theta_t, mu[1:]), sd[1:])
    th_rows = ad.add(np.zeros((len(energies), theta_t.size)), th)
    c = ad.concat([x_part, th_rows], axis=1)
    w = inverse_transform(model.spec, model.masses(c), z)
    value = ad.mean(ad.exp(w))
    value.backward()
    return value.item(), theta_t.grad.copy()


def surrogate_grad_theta(model: FlowModel, energies, theta, z) -> np.ndarray:
    return surrogate_value_and_grad(model, energies, theta, z)[1]
