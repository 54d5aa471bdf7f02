"""Outer design-optimisation loop.

Each iteration samples candidate designs around the nominal one, simulates
them, scores them with an objective model (a fresh MINE estimate of the
information carried by the deposits, or the loss of an energy regressor),
fits a differentiable surrogate of the score, and walks the nominal design
downhill on that surrogate inside a trust region.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import ndtri

from . import flow as fl
from . import mi_surrogate as mis
from .autodiff import NumericError
from .calosim import CandidateSet, ShowerModel, sample_energies, simulate, validate_design
from .mine import MineConfig, estimate_mi_batch
from .nn import TrainingError, checkpoint_save
from .reco import RecoConfig, RecoModel, per_event_delta, train_reco

log = logging.getLogger(__name__)

VARIANTS = ("mi", "reco")
DEFAULT_K = {"reco": 30, "mi": 117}

# independent RNG streams per iteration
STREAM_CANDIDATES, STREAM_ENERGY, STREAM_SIMULATION, STREAM_TRAINING, STREAM_DESCENT = range(5)


class DescentError(FloatingPointError):
    """The surrogate produced a non-finite value or gradient."""


@dataclass
class LoopConfig:
    variant: str = "reco"
    n_features: int = 2
    candidates: int | None = None
    events: int = 700
    sigma: float = 1.5
    epsilon: float = 1.5
    iterations: int = 40
    energy_range: tuple[float, float] = (1.0, 20.0)
    theta0: tuple[float, ...] | None = None
    t_max: float = 25.0
    penalty: float = 10.0
    inner_lr: float = 0.05
    inner_steps: int = 200
    descent_samples: int | None = None
    max_step_fraction: float = 0.1
    transfer: bool = True
    seed: int = 0
    reco: RecoConfig = field(default_factory=RecoConfig)
    flow: fl.FlowConfig = field(default_factory=fl.FlowConfig)
    mine: MineConfig = field(default_factory=MineConfig)
    surrogate: mis.MiSurrogateConfig = field(default_factory=mis.MiSurrogateConfig)
    shower: ShowerModel = field(default_factory=ShowerModel)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.candidates is None:
            self.candidates = DEFAULT_K[self.variant]
        if self.descent_samples is None:
            self.descent_samples = self.events
        if self.theta0 is None:
            self.theta0 = (1.0,) * self.n_features
        self.theta0 = tuple(float(t) for t in self.theta0)
        self.energy_range = tuple(float(e) for e in self.energy_range)
        validate_design(np.array(self.theta0))
        if len(self.theta0) != self.n_features:
            raise ValueError(f"theta0 has {len(self.theta0)} entries, expected {self.n_features}")
        for name in ("sigma", "epsilon", "t_max", "inner_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.penalty < 0:
            raise ValueError("penalty must be >= 0")
        if self.candidates < 1 or self.events < 1 or self.descent_samples < 1 \
                or self.iterations < 0 or self.inner_steps < 0:
            raise ValueError("candidates and events must be >= 1, iterations and inner_steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterationRow:
    iteration: int
    run: int
    theta: np.ndarray
    objective: float
    surrogate_pred: float
    seed: int
    status: str = "ok"
    wall_clock: float = 0.0

    @property
    def scint_sum(self) -> float:
        return float(self.theta[1::2].sum())

    @property
    def abs_sum(self) -> float:
        return float(self.theta[0::2].sum())


def csv_header(n_features: int) -> list[str]:
    return (["iter", "run"] + [f"theta_{j + 1}" for j in range(n_features)]
            + ["objective", "surrogate_pred", "scint_sum", "abs_sum", "seed"])


def _fmt(v: float) -> str:
    return repr(float(v))


@dataclass
class EvolutionRecord:
    n_features: int
    run: int = 0
    rows: list[IterationRow] = field(default_factory=list)
    failure: str | None = None
    path: Path | None = None

    def append(self, row: IterationRow) -> None:
        if self.rows and row.iteration != self.rows[-1].iteration + 1:
            raise ValueError("iteration index must increase by one")
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(self.csv_row(row))

    def csv_row(self, row: IterationRow) -> list[str]:
        return ([str(row.iteration), str(row.run)] + [_fmt(t) for t in row.theta]
                + [_fmt(row.objective), _fmt(row.surrogate_pred), _fmt(row.scint_sum),
                   _fmt(row.abs_sum), str(row.seed)])

    def open(self, path: str | Path, header: bool = True) -> None:
        """Stream rows to ``path``; without ``header`` rows are appended to an existing file."""
        self.path = Path(path)
        if header:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(csv_header(self.n_features))

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def thetas(self) -> np.ndarray:
        return np.array([r.theta for r in self.rows])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def final_theta(self) -> np.ndarray:
        return self.rows[-1].theta


@dataclass
class IterationState:
    theta: np.ndarray
    iteration: int = 0
    reco_model: RecoModel | None = None
    flow_model: fl.FlowModel | None = None
    mi_model: mis.MiSurrogate | None = None
    trace: list[float] = field(default_factory=list)

    def checkpoints(self) -> dict[str, object]:
        found = {"reco": self.reco_model, "flow": self.flow_model, "mi_surrogate": self.mi_model}
        return {k: v for k, v in found.items() if v is not None}


# ---------------------------------------------------------------- seeding

def stream_seed(master: int, iteration: int, stream: int, *extra: int) -> int:
    seq = np.random.SeedSequence([int(master), int(iteration), int(stream), *map(int, extra)])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def stream_rng(master: int, iteration: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master), int(iteration), int(stream)]))


# -------------------------------------------------------------- operations

def sample_candidates(theta, sigma: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` isotropic Gaussian perturbations of ``theta``, clamped at zero; shape (k, F)."""
    theta = validate_design(theta)
    if k < 1:
        raise ValueError("need at least one candidate")
    draws = theta + sigma * rng.standard_normal((k, theta.size))
    return np.maximum(draws, 0.0)


Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


def inner_descent(objective: Objective, theta_start, epsilon: float, lr: float = 0.05,
                  steps: int = 200, t_max: float = 25.0, penalty: float = 10.0,
                  max_step: float | None = None) -> np.ndarray:
    """Projected gradient descent on ``objective`` plus the thickness-cap penalty.

    Stops before the first step that would leave the ball of radius ``epsilon``
    around ``theta_start`` and returns the last iterate inside it. A step longer
    than ``max_step`` is shortened to that length, keeping its direction.
    """
    start = np.asarray(theta_start, dtype=float)
    theta = start.copy()
    for _ in range(steps):
        _, grad = objective(theta)
        grad = np.asarray(grad, dtype=float)
        if not np.isfinite(grad).all():
            raise DescentError(f"non-finite surrogate gradient at theta={theta}")
        excess = max(0.0, float(theta.sum()) - t_max)
        move = lr * (grad + 2.0 * penalty * excess)
        if max_step is not None:
            length = float(np.linalg.norm(move))
            if length > max_step:
                move *= max_step / length
        step = np.maximum(theta - move, 0.0)
        if np.linalg.norm(step - start) >= epsilon:
            break
        theta = step
    return theta


def ascent(objective: Objective) -> Objective:
    """Turn a quantity to maximise into one to minimise."""
    def negated(theta):
        v, g = objective(theta)
        return -v, -np.asarray(g)
    return negated


def simulate_candidates(thetas: np.ndarray, config: LoopConfig, iteration: int) -> CandidateSet:
    lo, hi = config.energy_range
    batches = []
    for k, th in enumerate(thetas):
        e = sample_energies(lo, hi, config.events, stream_seed(config.seed, iteration, STREAM_ENERGY, k))
        batches.append(simulate(th, e, config.shower, stream_seed(config.seed, iteration, STREAM_SIMULATION, k)))
    return CandidateSet(thetas, batches)


def _mi_step(state: IterationState, cands: CandidateSet, config: LoopConfig, it: int):
    k = len(cands)
    seeds = [stream_seed(config.seed, it, STREAM_TRAINING, j) for j in range(k)]
    estimates = estimate_mi_batch(cands.energies(), cands.deposits(), seeds, config.mine)
    cands.deltas = np.array([e.value for e in estimates])
    warm = state.mi_model if config.transfer else None
    model = mis.train_mi_surrogate(cands.thetas, cands.deltas, warm, config.surrogate,
                                   seed=stream_seed(config.seed, it, STREAM_TRAINING, k))
    scale = model.output_scale

    def objective(theta):
        # descend on the negated prediction in standardised units
        v, g = mis.surrogate_value_and_grad(model, theta)
        return -v / scale, -g / scale

    state.mi_model = model
    return float(cands.deltas.mean()), objective, lambda th: mis.surrogate_value_and_grad(model, th)[0]


def _reco_step(state: IterationState, cands: CandidateSet, config: LoopConfig, it: int):
    seed = stream_seed(config.seed, it, STREAM_TRAINING)
    warm = state.reco_model if config.transfer else None
    reco = train_reco(cands, warm, config.reco, seed=seed)
    deltas = np.stack([per_event_delta(reco, b.deposits, b.energies, t)
                       for t, b in zip(cands.thetas, cands.batches)])
    cands.deltas = deltas
    w = fl.log_loss(deltas.ravel())
    cond = np.vstack([fl.flow_conditions(b.energies, t) for t, b in zip(cands.thetas, cands.batches)])
    fwarm = state.flow_model if config.transfer else None
    flow = fl.train_flow(w, cond, fwarm, config.flow, seed=seed + 1)
    rng = stream_rng(config.seed, it, STREAM_DESCENT)
    energies = rng.uniform(*config.energy_range, size=config.descent_samples)
    # latents from the normal restricted to the interior, where w depends on theta
    lam = flow.spec.tail_mass
    z = ndtri(lam + (1.0 - 2.0 * lam) * rng.uniform(size=config.descent_samples))

    def objective(theta):
        # log of the mean surrogate loss keeps step sizes comparable across scales
        v, g = fl.surrogate_value_and_grad(flow, energies, theta, z)
        return math.log(v), g / v

    state.reco_model, state.flow_model = reco, flow
    return float(deltas.mean()), objective, lambda th: fl.surrogate_value_and_grad(flow, energies, th, z)[0]


def run_iteration(state: IterationState, config: LoopConfig, run: int = 0,
                  checkpoint_dir: Path | None = None) -> IterationRow:
    """One full outer iteration; advances ``state`` in place and returns its record row."""
    it = state.iteration + 1
    started = time.perf_counter()
    if not config.transfer:
        state.reco_model = state.flow_model = state.mi_model = None
    thetas = sample_candidates(state.theta, config.sigma, config.candidates,
                               stream_rng(config.seed, it, STREAM_CANDIDATES))
    cands = simulate_candidates(thetas, config, it)
    status = "ok"
    new_theta = state.theta
    try:
        step = _mi_step if config.variant == "mi" else _reco_step
        objective_value, objective, predict = step(state, cands, config, it)
        new_theta = inner_descent(objective, state.theta, config.epsilon, config.inner_lr,
                                  config.inner_steps, config.t_max, config.penalty,
                                  config.max_step_fraction * config.epsilon)
        pred = float(predict(new_theta))
    except (DescentError, TrainingError, NumericError) as exc:
        log.warning("iteration %d aborted: %s", it, exc)
        status, objective_value, pred, new_theta = "aborted", float("nan"), float("nan"), state.theta
    state.theta = np.asarray(new_theta, dtype=float).copy()
    state.iteration = it
    state.trace.append(objective_value)
    if checkpoint_dir is not None and config.transfer:
        for name, model in state.checkpoints().items():
            checkpoint_save(model.params, Path(checkpoint_dir) / f"{name}.ckpt")
    return IterationRow(it, run, state.theta.copy(), objective_value, pred, config.seed, status,
                        time.perf_counter() - started)


def run_study(config: LoopConfig, run: int = 0, csv_path: str | Path | None = None,
              checkpoint_dir: str | Path | None = None, header: bool = True) -> EvolutionRecord:
    """Run ``config.iterations`` iterations from ``theta0``.

    Anything other than a recoverable per-iteration failure stops the study;
    the rows completed so far are returned with ``failure`` set.
    """
    record = EvolutionRecord(config.n_features, run)
    if csv_path is not None:
        record.open(csv_path, header)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    state = IterationState(np.array(config.theta0, dtype=float))
    record.append(IterationRow(0, run, state.theta.copy(), float("nan"), float("nan"), config.seed))
    for _ in range(config.iterations):
        try:
            row = run_iteration(state, config, run, checkpoint_dir)
        except Exception as exc:  # noqa: BLE001 - surfaced through the record
            log.error("run %d failed at iteration %d: %s", run, state.iteration + 1, exc)
            record.failure = f"{type(exc).__name__}: {exc}"
            break
        record.append(row)
        log.info("run %d iter %d theta=%s objective=%.5g", run, row.iteration,
                 np.array2string(row.theta, precision=3), row.objective)
    return record


def with_overrides(config: LoopConfig, **changes) -> LoopConfig:
    return replace(config, **changes)
