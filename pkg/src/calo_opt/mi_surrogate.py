"""Regression of estimated mutual information on the design parameters."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, ShapeError
from .nn import HIDDEN_WIDTH, AdamState, LrSchedule, MlpSpec, RunningStats, Standardizer, \
    TrainingError, hidden_widths, mlp_forward, mlp_init, train


class SurrogateDataError(ValueError):
    """Too few or degenerate designs to fit a surrogate."""


@dataclass
class MiSurrogateConfig:
    layers: int = 4
    width: int = HIDDEN_WIDTH
    lr: float = 5e-2
    epochs: int = 150

    def schedule(self) -> LrSchedule:
        return LrSchedule.exponential(self.lr, self.epochs)


@dataclass
class MiSurrogate:
    """``delta_hat(theta)`` in nats; inputs and output are standardised internally."""

    params: ParamSet
    spec: MlpSpec
    inputs: Standardizer
    output: RunningStats
    losses: list[float] = field(default_factory=list, repr=False)
    optimizer: AdamState | None = field(default=None, repr=False)

    def _raw(self, theta_t) -> ad.Tensor:
        th = ad.div(ad.sub(theta_t, self.inputs.mean), self.inputs.std)
        return mlp_forward(self.params, th, self.spec)

    def predict(self, theta) -> np.ndarray | float:
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        out = self._raw(np.atleast_2d(theta)).data[:, 0]
        out = out * float(self.output.std) + float(self.output.mean)
        return float(out[0]) if single else out

    @property
    def output_scale(self) -> float:
        return float(self.output.std)


def _check(thetas: np.ndarray, deltas: np.ndarray) -> None:
    if thetas.ndim != 2 or deltas.shape != (len(thetas),):
        raise ShapeError(f"need thetas (K, F) and deltas (K,), got {thetas.shape} and {deltas.shape}")
    k, f = thetas.shape
    if k < f + 1:
        raise SurrogateDataError(f"{k} designs cannot constrain a surrogate in {f} dimensions")
    if np.linalg.matrix_rank(thetas - thetas.mean(axis=0)) < 1:
        raise SurrogateDataError("all candidate designs coincide")
    if not np.isfinite(deltas).all():
        raise SurrogateDataError("non-finite MI estimates")


def _mse(params, x, t, spec):
    return ad.mean(ad.square(ad.sub(mlp_forward(params, x, spec), t)))


def train_mi_surrogate(thetas, deltas, warm_start: MiSurrogate | None = None,
                       config: MiSurrogateConfig = MiSurrogateConfig(), seed: int = 0) -> MiSurrogate:
    """Full-batch fit of ``delta(theta)``.

    Input scaling is fitted once and then inherited from a warm start, while
    the output scale accumulates over every estimate seen so far. A warm start
    also resumes the optimiser moments: at this learning rate a fresh ADAM
    state takes full-size first steps that undo most of the inherited fit.
    A warm fit that ends above its starting loss is discarded and redone
    from a fresh initialisation.
    """
    thetas = np.asarray(thetas, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    _check(thetas, deltas)
    spec = MlpSpec(hidden_widths(thetas.shape[1], 1, config.layers, config.width), seed=seed)
    if warm_start is not None:
        if warm_start.spec.widths != spec.widths:
            raise ShapeError(f"warm start has widths {warm_start.spec.widths}, need {spec.widths}")
        spec = warm_start.spec
        params = warm_start.params.copy()
        inputs = warm_start.inputs
        output = RunningStats(warm_start.output.count, np.copy(warm_start.output.total_mean),
                              np.copy(warm_start.output.m2))
    else:
        params = mlp_init(spec)
        inputs = Standardizer.fit(thetas)
        output = RunningStats()
    output.update(deltas)
    x = inputs.apply(thetas)
    t = output.apply(deltas)[:, None]

    def fit(params, state):
        return train(params, lambda p, xb, tb: _mse(p, xb, tb, spec), [x, t], config.schedule(),
                     batch_size=None, seed=seed, state=state)

    if warm_start is None:
        result = fit(params, AdamState())
    else:
        state = copy.deepcopy(warm_start.optimizer) if warm_start.optimizer is not None else AdamState()
        try:
            result = fit(params, state)
            diverged = result.losses[-1] > result.losses[0]
        except TrainingError:
            diverged = True
        if diverged:
            # inherited weights can blow up at this learning rate and leave
            # every unit saturated; refit from scratch on the same scaling
            result = fit(mlp_init(MlpSpec(spec.widths, seed=seed)), AdamState())
    return MiSurrogate(result.params, spec, inputs, output, result.losses, result.state)


def surrogate_value_and_grad(model: MiSurrogate, theta) -> tuple[float, np.ndarray]:
    """Predicted MI (nats) at ``theta`` and its gradient (nats per cm)."""
    theta_t = ad.Tensor(np.asarray(theta, dtype=float)[None, :], requires_grad=True, name="theta")
    raw = ad.sum(model._raw(theta_t))
    raw.backward()
    scale = model.output_scale
    return raw.item() * scale + float(model.output.mean), theta_t.grad[0] * scale


def mi_surrogate_grad(model: MiSurrogate, theta) -> np.ndarray:
    return surrogate_value_and_grad(model, theta)[1]
