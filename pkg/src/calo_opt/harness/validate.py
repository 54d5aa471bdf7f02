"""Oracle checks for the numerical building blocks, run by ``calo-opt validate``."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .. import autodiff as ad
from .. import flow as fl
from ..mine import MineConfig, estimate_mi, knn_mi
from ..nn import MlpSpec, Standardizer

GAUSSIAN_RHO = 0.9
GAUSSIAN_MI = -0.5 * np.log(1.0 - GAUSSIAN_RHO ** 2)  # 0.8304 nats

# full-batch MINE keeps the suite inside its time budget
MINE_CHECK = MineConfig(epochs=200, batch_size=None)
MINE_NULL_CHECK = MineConfig(epochs=100, batch_size=None)


@dataclass
class Check:
    name: str
    value: float
    target: str
    passed: bool
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.6g} (target {self.target}, {self.seconds:.1f}s)"


def correlated_gaussians(n: int, rho: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = rho * x + np.sqrt(1.0 - rho ** 2) * rng.standard_normal(n)
    return x, y


def random_mlp_graph(rng: np.random.Generator):
    """A random small MLP loss and a point to differentiate it at."""
    depth = int(rng.integers(1, 4))
    widths = [int(w) for w in rng.integers(1, 6, size=depth + 1)]
    spec = MlpSpec(widths, seed=int(rng.integers(2 ** 31)))
    batch = int(rng.integers(1, 5))
    point = {"x": rng.normal(size=(batch, widths[0]))}
    for name, shape in spec.shapes().items():
        point[name] = rng.normal(size=shape) * 0.8
    target = rng.normal(size=(batch, widths[-1]))

    def fn(x, **params):
        return ad.mean(ad.square(ad.sub(_forward(params, x, spec), target)))

    return fn, point


def _forward(params: dict, x, spec: MlpSpec):
    h = x
    for i in range(spec.n_layers):
        h = ad.add(ad.matmul(h, params[f"W{i}"]), params[f"b{i}"])
        if i < spec.n_layers - 1:
            h = ad.elu(h)
    return h


def check_gradients(n_graphs: int = 100, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_graphs):
        fn, point = random_mlp_graph(rng)
        worst = max(worst, ad.grad_check(fn, point))
    return Check("autodiff grad-check (100 random MLPs)", worst, "< 1e-4", worst < 1e-4)


def _random_flow(seed: int, n_cond: int = 3, roughen: float = 0.0) -> fl.FlowModel:
    rng = np.random.default_rng(seed)
    spec = fl.FlowSpec(-3.0, 2.0, 32)
    model = fl.FlowModel.create(spec, n_cond, seed=seed, conditions=Standardizer(np.zeros(n_cond), np.ones(n_cond)))
    if roughen:
        for name in model.params:
            model.params[name].data[...] += rng.normal(scale=roughen, size=model.params[name].shape)
    return model


def check_flow_roundtrip(seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    model = _random_flow(seed)
    cond = rng.normal(size=(2000, 3))
    w = rng.uniform(-5.0, 4.0, size=2000)
    u, _ = fl.flow_forward(model, w, cond)
    err_w = float(np.abs(fl.flow_inverse(model, u, cond) - w).max())
    z = rng.normal(size=2000) * 1.3
    back, _ = fl.flow_forward(model, fl.flow_inverse(model, z, cond), cond)
    err = max(err_w, float(np.abs(back - z).max()))
    return Check("flow round-trip max error", err, "< 1e-9", err < 1e-9)


def flow_mass(model: fl.FlowModel, cond: np.ndarray) -> float:
    """Integral of the conditional density, split at the support edges.

    Each tail is integrated out to where the latent has moved ten units past
    its edge, which is far enough for the remaining mass to be negligible.
    """
    spec = model.spec
    c = np.atleast_2d(cond)

    def density(v):
        return float(np.exp(fl.flow_log_density(model, np.array([v]), c))[0])

    q = model.masses(c).data[0]
    slope = (1.0 - 2.0 * spec.tail_mass) / (spec.bin_width * spec._edge_density())
    reach_lo, reach_hi = 10.0 / (slope * q[0]), 10.0 / (slope * q[-1])
    edges = np.linspace(spec.w_min, spec.w_max, spec.n_bins + 1)
    inner = sum(quad(density, a, b, limit=100)[0] for a, b in zip(edges[:-1], edges[1:]))
    lower = quad(density, spec.w_min - reach_lo, spec.w_min, limit=200)[0]
    upper = quad(density, spec.w_max, spec.w_max + reach_hi, limit=200)[0]
    return inner + lower + upper


def check_flow_normalisation(seed: int = 0, n_cond: int = 4) -> Check:
    rng = np.random.default_rng(seed)
    model = _random_flow(seed + 1, roughen=0.5)
    worst = max(abs(flow_mass(model, rng.normal(size=3)) - 1.0) for _ in range(n_cond))
    return Check("flow density quadrature |mass - 1|", worst, "< 1e-3", worst < 1e-3)


def check_mine_gaussian(seed: int = 0) -> Check:
    x, y = correlated_gaussians(5000, GAUSSIAN_RHO, seed)
    est = estimate_mi(x, y, seed=seed, config=MINE_CHECK).value
    rel = abs(est - GAUSSIAN_MI) / GAUSSIAN_MI
    return Check(f"MINE rho=0.9 estimate (analytic {GAUSSIAN_MI:.4f})", est, "within 15%", rel <= 0.15)


def check_mine_independent(seed: int = 0) -> Check:
    x, y = correlated_gaussians(5000, 0.0, seed + 7)
    est = estimate_mi(x, y, seed=seed, config=MINE_NULL_CHECK).value
    return Check("MINE independent estimate", est, "in [-0.05, 0.10]", -0.05 <= est <= 0.10)


def check_knn(seed: int = 0) -> Check:
    x, y = correlated_gaussians(5000, GAUSSIAN_RHO, seed + 3)
    est = knn_mi(x, y)
    rel = abs(est - GAUSSIAN_MI) / GAUSSIAN_MI
    return Check("knn_mi rho=0.9 estimate", est, "within 10%", rel <= 0.10)


SUITE: tuple[Callable[[], Check], ...] = (
    check_gradients, check_flow_roundtrip, check_flow_normalisation,
    check_mine_gaussian, check_mine_independent, check_knn,
)


def run_suite(echo: Callable[[str], None] | None = print) -> list[Check]:
    results = []
    for check in SUITE:
        start = time.perf_counter()
        result = check()
        result.seconds = time.perf_counter() - start
        if echo is not None:
            echo(result.line())
        results.append(result)
    return results
