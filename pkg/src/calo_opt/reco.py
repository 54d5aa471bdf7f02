"""Energy regression from scintillator deposits and the per-event loss it yields."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, ShapeError
from .calosim import CandidateSet
from .nn import HIDDEN_WIDTH, AdamState, LrSchedule, MlpSpec, Standardizer, hidden_widths, \
    mlp_forward, mlp_init, train


@dataclass
class RecoConfig:
    layers: int = 3
    width: int = HIDDEN_WIDTH
    stages: tuple[tuple[float, int], ...] = ((4e-4, 200), (1e-5, 200))
    batch_size: int | None = 128

    def schedule(self) -> LrSchedule:
        return LrSchedule.staged(self.stages)


@dataclass
class RecoModel:
    """Regressor for ``x`` given ``[y, theta]``; inputs and target are standardised."""

    params: ParamSet
    spec: MlpSpec
    inputs: Standardizer
    target: Standardizer
    losses: list[float] = field(default_factory=list, repr=False)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def predict(self, deposits, theta) -> np.ndarray:
        """Reconstructed energies (GeV) for deposits (M, V) at design ``theta``."""
        feats = _features(np.asarray(deposits, dtype=float), theta)
        out = mlp_forward(self.params, self.inputs.apply(feats), self.spec).data[:, 0]
        return self.target.invert(out[:, None])[:, 0]


def _features(deposits: np.ndarray, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    tiled = np.broadcast_to(theta, (len(deposits), theta.size))
    return np.hstack([deposits, tiled])


def pooled_rows(candidates: CandidateSet) -> tuple[np.ndarray, np.ndarray]:
    """Stack every candidate's events into rows ``[y, theta]`` and targets ``x``."""
    feats = [_features(b.deposits, t) for t, b in zip(candidates.thetas, candidates.batches)]
    return np.vstack(feats), np.concatenate([b.energies for b in candidates.batches])


def _mse(params, x, t, spec):
    pred = mlp_forward(params, x, spec)
    return ad.mean(ad.square(ad.sub(pred, t)))


def train_reco(candidates: CandidateSet, warm_start: RecoModel | None = None,
               config: RecoConfig = RecoConfig(), seed: int = 0,
               freeze_scaling: bool = True) -> RecoModel:
    """Fit the regressor on all candidates pooled together.

    A warm start reuses the given weights, and with ``freeze_scaling`` also its
    standardisation, so successive iterations see the same input coordinates.
    """
    feats, energies = pooled_rows(candidates)
    spec = MlpSpec(hidden_widths(feats.shape[1], 1, config.layers, config.width), seed=seed)
    if warm_start is not None:
        if warm_start.spec.widths != spec.widths:
            raise ShapeError(f"warm start has widths {warm_start.spec.widths}, need {spec.widths}")
        params = warm_start.params.copy()
        spec = warm_start.spec
    else:
        params = mlp_init(spec)
    if warm_start is not None and freeze_scaling:
        inputs, target = warm_start.inputs, warm_start.target
    else:
        inputs, target = Standardizer.fit(feats), Standardizer.fit(energies)
    x = inputs.apply(feats)
    t = target.apply(energies[:, None])
    result = train(params, lambda p, xb, tb: _mse(p, xb, tb, spec), [x, t], config.schedule(),
                   batch_size=config.batch_size, seed=seed, state=AdamState())
    return RecoModel(params, spec, inputs, target, result.losses)


def per_event_delta(model: RecoModel, deposits, energies, theta) -> np.ndarray:
    """Squared relative error ``((x_hat - x) / x)^2`` for each event."""
    energies = np.asarray(energies, dtype=float)
    if (energies <= 0).any():
        raise ValueError("true energies must be positive")
    pred = model.predict(deposits, theta)
    return ((pred - energies) / energies) ** 2
