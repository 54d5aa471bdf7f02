"""Mutual information neural estimation with the Donsker-Varadhan bound.

Several independent estimators can be trained in one stacked pass: every
parameter carries a leading axis of size K and each copy sees its own data,
permutations and EMA. ``knn_mi`` is a Kraskov estimator kept as an
independent cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .nn import AdamState, LrSchedule, MlpSpec, TrainingError, adam_step, hidden_widths, \
    mlp_forward, mlp_init_stack

MIN_EVENTS = 32
EMA_DECAY = 0.99


class MiError(ValueError):
    """Input unsuitable for mutual information estimation."""


@dataclass
class MineConfig:
    epochs: int = 2000
    lr: float = 1e-2
    batch_size: int | None = 128
    width: int = 64
    encoder_layers: int = 3
    head_layers: int = 2
    readout_fraction: float = 0.1
    smoothing: int = 5

    def schedule(self) -> LrSchedule:
        return LrSchedule.exponential(self.lr, self.epochs)


@dataclass
class MiEstimate:
    value: float
    trace: np.ndarray = field(repr=False)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,bound_nats\n")
            for i, v in enumerate(self.trace):
                fh.write(f"{i},{float(v)!r}\n")


@dataclass
class MineNetwork:
    """Statistics network T(x, y): two encoders feeding a joint head."""

    params: ParamSet
    x_spec: MlpSpec
    y_spec: MlpSpec
    head_spec: MlpSpec
    ema: np.ndarray | None = None

    @classmethod
    def create(cls, x_dim: int, y_dim: int, seeds: Sequence[int], config: MineConfig = MineConfig()):
        w = config.width
        x_spec = MlpSpec(hidden_widths(x_dim, w, config.encoder_layers, w), prefix="x_")
        y_spec = MlpSpec(hidden_widths(y_dim, w, config.encoder_layers, w), prefix="y_")
        head_spec = MlpSpec(hidden_widths(2 * w, 1, config.head_layers, w), prefix="h_")
        params = ParamSet()
        # each copy gets distinct streams for its three sub-networks
        for spec, offset in ((x_spec, 0), (y_spec, 1), (head_spec, 2)):
            mlp_init_stack(spec, [hash_seed(s, offset) for s in seeds], into=params)
        return cls(params, x_spec, y_spec, head_spec)

    @property
    def copies(self) -> int:
        return self.params["x_W0"].shape[0]

    def statistics(self, x, y, perm: np.ndarray) -> tuple[Tensor, Tensor]:
        """T on joint pairs and on pairs with y permuted; each of shape (K, B)."""
        hx = mlp_forward(self.params, x, self.x_spec, final_activation=True)
        hy = mlp_forward(self.params, y, self.y_spec, final_activation=True)
        w = self.x_spec.widths[-1]
        w0 = self.params["h_W0"]
        # concat(hx, hy) @ W0 split into its x and y halves
        ax = ad.matmul(hx, w0[:, :w, :])
        ay = ad.matmul(hy, w0[:, w:, :])
        ay_marg = ad.permute(ay, perm, axis=1)
        b0 = self.params["h_b0"]
        outs = []
        for pre in (ad.add(ax, ay), ad.add(ax, ay_marg)):
            h = ad.elu(ad.add(pre, b0))
            for i in range(1, self.head_spec.n_layers):
                h = ad.add(ad.matmul(h, self.params[f"h_W{i}"]), self.params[f"h_b{i}"])
                if i < self.head_spec.n_layers - 1:
                    h = ad.elu(h)
            outs.append(ad.reshape(h, h.shape[:-1]))
        return outs[0], outs[1]


def hash_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1)[0])


def dv_bound(t_joint, t_marginal) -> Tensor:
    """mean(T_joint) - log mean(exp T_marginal), over the last axis."""
    t_joint, t_marginal = ad.as_tensor(t_joint), ad.as_tensor(t_marginal)
    n = t_marginal.shape[-1]
    if t_joint.shape[-1] == 0 or n == 0:
        raise MiError("empty batch")
    return ad.sub(ad.mean(t_joint, axis=-1), ad.affine(ad.logsumexp(t_marginal, axis=-1), 1.0, -np.log(n)))


def _standardize(a: np.ndarray) -> np.ndarray:
    # stats per copy and per dimension, over events (axis 1)
    mu = a.mean(axis=1, keepdims=True)
    sd = a.std(axis=1, keepdims=True)
    sd = np.where(sd > 0, sd, 1.0)
    return (a - mu) / sd


def _readout(trace: np.ndarray, fraction: float, smooth: int) -> float:
    n = len(trace)
    w = max(1, min(smooth, n))
    ma = np.convolve(trace, np.ones(w) / w, mode="valid")
    tail = max(1, int(np.ceil(fraction * n)))
    return float(ma[-min(tail, len(ma)):].max())


def _as3d(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[:, :, None] if a.ndim == 2 else a


def estimate_mi_batch(xs, ys, seeds: Sequence[int], config: MineConfig = MineConfig()) -> list[MiEstimate]:
    """Train ``K`` fresh estimators at once; ``xs`` (K, M[, U]), ``ys`` (K, M[, V])."""
    xs, ys = _as3d(xs), _as3d(ys)
    k, m = xs.shape[:2]
    if ys.shape[:2] != (k, m) or len(seeds) != k:
        raise MiError(f"mismatched inputs: x {xs.shape}, y {ys.shape}, {len(seeds)} seeds")
    if m < MIN_EVENTS:
        raise MiError(f"need at least {MIN_EVENTS} events for a stable bound, got {m}")
    xs, ys = _standardize(xs), _standardize(ys)
    net = MineNetwork.create(xs.shape[2], ys.shape[2], seeds, config)
    schedule = config.schedule()
    state = AdamState()
    bs = m if config.batch_size is None else min(config.batch_size, m)
    rngs = [np.random.default_rng(hash_seed(s, 3)) for s in seeds]
    rows = np.arange(k)[:, None]
    ema = None
    trace = np.zeros((schedule.total_epochs, k))
    for epoch in range(schedule.total_epochs):
        lr = schedule.rate(epoch)
        order = np.stack([r.permutation(m) for r in rngs]) if bs < m else np.broadcast_to(np.arange(m), (k, m))
        for start in range(0, m, bs):
            idx = order[:, start:start + bs]
            n = idx.shape[1]
            perm = np.stack([r.permutation(n) for r in rngs])
            xb, yb = xs[rows, idx], ys[rows, idx]
            net.params.zero_grad()
            try:
                t_joint, t_marg = net.statistics(xb, yb, perm)
                shift = t_marg.data.max(axis=1, keepdims=True)
                e_marg = ad.exp(ad.sub(t_marg, shift))
                batch_mean = e_marg.data.mean(axis=1) * np.exp(shift[:, 0])
                ema = batch_mean if ema is None else EMA_DECAY * ema + (1 - EMA_DECAY) * batch_mean
                # gradient of log E[e^T] with the EMA as denominator
                scale = (np.exp(shift[:, 0]) / ema)[:, None]
                loss = ad.sub(ad.mean(ad.mul(e_marg, scale), axis=1), ad.mean(t_joint, axis=1)).sum()
                loss.backward()
            except ad.NumericError as exc:
                raise TrainingError(epoch, str(exc)) from exc
            bound = t_joint.data.mean(axis=1) - (np.log(e_marg.data.mean(axis=1)) + shift[:, 0])
            if not np.isfinite(bound).all():
                raise TrainingError(epoch, "non-finite bound")
            adam_step(net.params, state, lr)
            trace[epoch] += bound * n / m
    net.ema = ema
    return [MiEstimate(_readout(trace[:, i], config.readout_fraction, config.smoothing), trace[:, i].copy())
            for i in range(k)]


def estimate_mi(x, y, seed: int = 0, config: MineConfig = MineConfig()) -> MiEstimate:
    """MI in nats between paired samples ``x`` (M[, U]) and ``y`` (M[, V])."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    y = y[:, None] if y.ndim == 1 else y
    return estimate_mi_batch(x[None], y[None], [seed], config)[0]


def knn_mi(x, y, k: int = 3) -> float:
    """Kraskov (first algorithm) estimate in nats on standardised inputs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    y = y[:, None] if y.ndim == 1 else y
    n = len(x)
    if n < 50:
        raise MiError(f"knn_mi needs at least 50 samples, got {n}")
    if k < 1:
        raise MiError("k must be >= 1")
    joint = np.hstack([x, y])
    unique = np.unique(joint, axis=0).shape[0]
    if n - unique > n / 2:
        raise MiError(f"{n - unique} of {n} samples are duplicates; estimator is degenerate")
    x, y = _standardize(x[None])[0], _standardize(y[None])[0]
    joint = np.hstack([x, y])
    dist, _ = cKDTree(joint).query(joint, k=k + 1, p=np.inf)
    eps = np.nextafter(dist[:, k], 0)
    nx = cKDTree(x).query_ball_point(x, eps, p=np.inf, return_length=True) - 1
    ny = cKDTree(y).query_ball_point(y, eps, p=np.inf, return_length=True) - 1
    return float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1)))
