"""MLPs, ADAM, learning-rate schedules, a mini-batch trainer and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, ShapeError, Tensor

HIDDEN_WIDTH = 64

CHECKPOINT_MAGIC = b"CALOPT01"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}: {detail}")
        self.epoch = epoch
        self.detail = detail


class CheckpointError(ValueError):
    """Checkpoint file is truncated or malformed."""


class CheckpointVersionError(CheckpointError):
    """Bad magic bytes or unsupported format version."""


# ------------------------------------------------------------------- MLP

@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output; ELU between layers, identity at the end."""

    widths: tuple[int, ...]
    seed: int = 0
    activation: str = "elu"
    prefix: str = ""

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"all widths must be >= 1, got {self.widths}")
        if self.activation != "elu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            out[f"{self.prefix}W{i}"] = (fan_in, fan_out)
            out[f"{self.prefix}b{i}"] = (fan_out,)
        return out

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


def hidden_widths(n_in: int, n_out: int, n_layers: int, width: int = HIDDEN_WIDTH) -> tuple[int, ...]:
    """Widths for an ``n_layers`` linear-layer MLP with constant hidden width."""
    return (n_in,) + (width,) * (n_layers - 1) + (n_out,)


def _init_arrays(spec: MlpSpec, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"{spec.prefix}W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        arrays[f"{spec.prefix}b{i}"] = np.zeros(fan_out)
    return arrays


def mlp_init(spec: MlpSpec, into: ParamSet | None = None) -> ParamSet:
    """Glorot-uniform weights, zero biases; deterministic in ``spec.seed``."""
    params = into if into is not None else ParamSet()
    for name, value in _init_arrays(spec, spec.seed).items():
        params.add(name, value)
    return params


def mlp_init_stack(spec: MlpSpec, seeds: Sequence[int], into: ParamSet | None = None) -> ParamSet:
    """Independent copies along a leading axis, copy ``k`` initialised with ``seeds[k]``.

    Weights get shape ``(K, fan_in, fan_out)``, biases ``(K, 1, fan_out)`` so the
    same forward code serves one network or a stack of them.
    """
    params = into if into is not None else ParamSet()
    per_seed = [_init_arrays(spec, int(s)) for s in seeds]
    for name in per_seed[0]:
        stacked = np.stack([arrs[name] for arrs in per_seed])
        if name[len(spec.prefix):].startswith("b"):
            stacked = stacked[:, None, :]
        params.add(name, stacked)
    return params


def mlp_forward(params: ParamSet, x, spec: MlpSpec, final_activation: bool = False) -> Tensor:
    h = ad.as_tensor(x)
    p = spec.prefix
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        h = ad.add(ad.matmul(h, params[f"{p}W{i}"]), params[f"{p}b{i}"])
        if i < last or final_activation:
            h = ad.elu(h)
    return h


# ------------------------------------------------------------------- ADAM

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamSet, state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected ADAM update using the gradients stored on ``params``."""
    if lr is not None:
        state.lr = lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    buf = params.flat()
    g = params.flat_grad()
    if "flat" not in state.m:
        state.m["flat"] = np.zeros_like(buf)
        state.v["flat"] = np.zeros_like(buf)
    m = state.m["flat"]
    v = state.v["flat"]
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    buf -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --------------------------------------------------------------- schedules

@dataclass(frozen=True)
class LrSchedule:
    """Either piecewise-constant stages or per-epoch exponential decay."""

    kind: str
    stages: tuple[tuple[float, int], ...] = ()
    initial: float = 0.0
    decay: float = 0.999
    floor_fraction: float = 1e-4
    epochs: int = 0

    @classmethod
    def staged(cls, stages: Sequence[tuple[float, int]]) -> LrSchedule:
        stages = tuple((float(r), int(n)) for r, n in stages)
        if not stages or any(r <= 0 or n < 0 for r, n in stages):
            raise ValueError(f"invalid stages {stages}")
        return cls(kind="staged", stages=stages)

    @classmethod
    def exponential(cls, initial: float, epochs: int, decay: float = 0.999,
                    floor_fraction: float = 1e-4) -> LrSchedule:
        if initial <= 0 or not 0 < decay <= 1 or epochs < 0:
            raise ValueError("invalid exponential schedule")
        return cls(kind="exponential", initial=float(initial), decay=decay,
                   floor_fraction=floor_fraction, epochs=int(epochs))

    @property
    def total_epochs(self) -> int:
        if self.kind == "staged":
            return sum(n for _, n in self.stages)
        return self.epochs

    def rate(self, epoch: int) -> float:
        """Learning rate for a zero-based epoch index."""
        if self.kind == "staged":
            end = 0
            for r, n in self.stages:
                end += n
                if epoch < end:
                    return r
            return self.stages[-1][0]
        return self.initial * max(self.decay ** epoch, self.floor_fraction)

    def scaled(self, factor: float) -> LrSchedule:
        """Same rates with every epoch count multiplied by ``factor`` (at least 1 each)."""
        if self.kind == "staged":
            return LrSchedule.staged([(r, max(1, round(n * factor))) for r, n in self.stages])
        return LrSchedule.exponential(self.initial, max(1, round(self.epochs * factor)),
                                      self.decay, self.floor_fraction)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: ParamSet
    losses: list[float]
    state: AdamState


def train(params: ParamSet, loss_fn: Callable[..., Tensor], dataset: Sequence[np.ndarray],
          schedule: LrSchedule, batch_size: int | None = 128, seed: int = 0,
          state: AdamState | None = None) -> TrainResult:
    """Minimise ``loss_fn(params, *batch)`` with ADAM over shuffled mini-batches.

    ``params`` is updated in place. Shuffling for epoch ``e`` is seeded by
    ``(seed, e)``. ``batch_size=None`` means full batch.
    """
    n = len(dataset[0])
    if n == 0:
        raise ValueError("empty dataset")
    if any(len(a) != n for a in dataset):
        raise ShapeError("dataset arrays differ in length")
    state = state or AdamState()
    bs = n if batch_size is None else min(batch_size, n)
    losses: list[float] = []
    for epoch in range(schedule.total_epochs):
        lr = schedule.rate(epoch)
        if bs == n:
            batches = [np.arange(n)]
        else:
            order = np.random.default_rng([seed, epoch]).permutation(n)
            batches = [order[i:i + bs] for i in range(0, n, bs)]
        total = 0.0
        for idx in batches:
            params.zero_grad()
            try:
                loss = loss_fn(params, *(a[idx] for a in dataset))
                loss.backward()
            except ad.NumericError as exc:
                raise TrainingError(epoch, str(exc)) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(epoch, f"loss={value}")
            adam_step(params, state, lr)
            total += value * len(idx)
        losses.append(total / n)
    return TrainResult(params, losses, state)


# -------------------------------------------------------------- checkpoint

def checkpoint_save(params: ParamSet | Mapping[str, np.ndarray], path: str | Path) -> None:
    arrays = params.arrays() if isinstance(params, ParamSet) else params
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, value in arrays.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def checkpoint_load(path: str | Path,
                    expect: ParamSet | Mapping[str, tuple[int, ...]] | None = None) -> ParamSet:
    """Read a checkpoint; with ``expect``, names and shapes must match exactly."""
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic bytes {blob[:8]!r}")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = blob[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    params = ParamSet()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        params.add(name, data)
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    if expect is not None:
        shapes = ({k: t.shape for k, t in expect.items()} if isinstance(expect, ParamSet)
                  else {k: tuple(v) for k, v in expect.items()})
        got = {k: t.shape for k, t in params.items()}
        if got != shapes:
            raise ShapeError(f"{path}: checkpoint layout {got} does not match expected {shapes}")
    return params


# --------------------------------------------------------- standardisation

@dataclass
class Standardizer:
    """Per-column affine map to zero mean and unit variance."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, a: np.ndarray) -> Standardizer:
        a = np.asarray(a, dtype=float)
        a = a[:, None] if a.ndim == 1 else a
        sd = a.std(axis=0)
        return cls(a.mean(axis=0), np.where(sd > 1e-12, sd, 1.0))

    def apply(self, a):
        return (np.asarray(a, dtype=float) - self.mean) / self.std

    def invert(self, a):
        return np.asarray(a, dtype=float) * self.std + self.mean


@dataclass
class RunningStats:
    """Welford accumulator over rows; exposes the same surface as ``Standardizer``."""

    count: int = 0
    total_mean: np.ndarray | float = 0.0
    m2: np.ndarray | float = 0.0

    def update(self, a) -> RunningStats:
        a = np.asarray(a, dtype=float)
        for row in a:
            self.count += 1
            delta = row - self.total_mean
            self.total_mean = self.total_mean + delta / self.count
            self.m2 = self.m2 + delta * (row - self.total_mean)
        return self

    @property
    def mean(self):
        return self.total_mean

    @property
    def std(self):
        if self.count < 2:
            return np.ones_like(np.asarray(self.total_mean, dtype=float))
        sd = np.sqrt(np.asarray(self.m2) / self.count)
        return np.where(sd > 1e-12, sd, 1.0)

    def apply(self, a):
        return (np.asarray(a, dtype=float) - self.mean) / self.std

    def invert(self, a):
        return np.asarray(a, dtype=float) * self.std + self.mean
