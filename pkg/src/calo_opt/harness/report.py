"""CSV, SVG and manifest output for a finished study."""

from __future__ import annotations

import csv
import json
import math
import platform
from pathlib import Path
from typing import Sequence

import numpy as np

from ..optloop import EvolutionRecord, csv_header
from .runner import AggregateTrace, ReplicaResult

WIDTH, HEIGHT = 1200, 800
MARGIN = dict(left=90, right=110, top=60, bottom=80)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")

# fixed choices that are not visible in the loop configuration itself
RESOLVED_DECISIONS = {
    "locality_metric": "euclidean",
    "trust_region_epsilon": "equal to sigma unless overridden",
    "candidate_boundary": "negative draws clamped to 0",
    "inner_descent_return": "last iterate inside the trust region",
    "inner_step_clip": "step length capped at max_step_fraction * epsilon",
    "reco_descent_objective": "log of the mean sampled loss",
    "mi_descent_objective": "negated surrogate prediction in standardised units",
    "descent_latents": "normal restricted to the flow's interior latent range",
    "hidden_width": 64,
    "weight_init": "glorot uniform, zero biases",
    "batch_size": "128 (reconstruction, flow, MINE); full batch for the MI surrogate",
    "mine_inputs": "standardised per dimension",
    "mine_readout": "max of a 5-epoch moving average over the last 10% of epochs",
    "mine_network": "separate 3-layer x and y encoders feeding a 2-layer joint head",
    "mi_scheduler": "learning rate x0.999 per epoch, floored at 1e-4 of the initial rate",
    "shower_start": "exponential conversion depth, mean 9/7 radiation lengths",
    "reco_conditioning": "theta appended to the deposits; one regressor for all candidates",
    "reco_scaling": "standardisation frozen at the first iteration when TL is on",
    "flow_support": "sample range padded by max(3 MAD, 0.5), frozen when TL is on",
    "flow_tails": "linear latent tails carrying 1e-3 of the mass per side",
    "mi_surrogate_scaling": "input scaling frozen at the first iteration, output running statistics",
    "mi_surrogate_warm_start": "weights and ADAM moments carried over; refit from scratch if the warm fit diverges",
}


def write_evolution(records: Sequence[EvolutionRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header(records[0].n_features))
        for record in records:
            for row in record.rows:
                w.writerow(record.csv_row(row))


def sum_header(trace: AggregateTrace) -> list[str]:
    cols = ["iter", "runs"]
    for name in trace.columns:
        cols += [f"{name}_mean", f"{name}_std"]
    return cols


def write_summary(trace: AggregateTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(sum_header(trace))
        for i, it in enumerate(trace.iterations):
            row = [str(int(it)), str(trace.runs)]
            for name in trace.columns:
                row += [repr(float(trace.mean[name][i])), repr(float(trace.std[name][i]))]
            w.writerow(row)


def read_summary(path: str | Path) -> AggregateTrace:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no data rows")
    n_features = sum(1 for k in rows[0] if k.startswith("theta_") and k.endswith("_mean"))
    trace = AggregateTrace(np.array([int(r["iter"]) for r in rows]), n_features, int(rows[0]["runs"]))
    for name in trace.columns:
        trace.mean[name] = np.array([float(r[f"{name}_mean"]) for r in rows])
        trace.std[name] = np.array([float(r[f"{name}_std"]) for r in rows])
    return trace


# --------------------------------------------------------------------- SVG

def _nice_ticks(lo: float, hi: float, n: int = 6) -> list[float]:
    if not hi > lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


class _Axis:
    def __init__(self, lo: float, hi: float, px_lo: float, px_hi: float, log: bool = False):
        self.log = log
        f = math.log10 if log else float
        self.lo, self.hi = f(lo), f(hi)
        if self.hi <= self.lo:
            self.hi = self.lo + 1.0
        self.px_lo, self.px_hi = px_lo, px_hi

    def __call__(self, v: float) -> float:
        v = math.log10(v) if self.log else v
        return self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)


def _polyline(points, color: str, dash: str | None = None, width: float = 2.0) -> str:
    if not points:
        return ""
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    style = f' stroke-dasharray="{dash}"' if dash else ""
    marks = "".join(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{color}"/>' for x, y in points)
    return (f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{style}/>'
            + marks)


def _band(xs, lo, hi, sx, sy, color: str) -> str:
    if len(xs) < 2:
        return ""
    upper = [(sx(x), sy(h)) for x, h in zip(xs, hi)]
    lower = [(sx(x), sy(l)) for x, l in zip(xs[::-1], lo[::-1])]
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in upper + lower)
    return f'<polygon points="{pts}" fill="{color}" fill-opacity="0.18" stroke="none"/>'


def render_svg(trace: AggregateTrace, title: str = "") -> str:
    """Line chart of the aggregate: thicknesses left (cm), metric right."""
    left = MARGIN["left"]
    right = WIDTH - MARGIN["right"]
    top = MARGIN["top"]
    bottom = HEIGHT - MARGIN["bottom"]
    its = trace.iterations.astype(float)
    x_hi = max(float(its.max()), 1.0)
    sx = _Axis(0.0, x_hi, left, right)

    thetas = [f"theta_{j + 1}" for j in range(trace.n_features)]
    t_hi = max(float(np.nanmax(trace.mean[n] + trace.std[n])) for n in thetas)
    y_ticks = _nice_ticks(0.0, max(t_hi, 1.0))
    sy = _Axis(0.0, y_ticks[-1], bottom, top)

    metric = {n: (trace.mean[n], trace.std[n]) for n in ("objective", "surrogate_pred")}
    finite = np.concatenate([m[np.isfinite(m)] for m, _ in metric.values()])
    positive = finite[finite > 0]
    use_log = positive.size == finite.size and finite.size > 0 and positive.max() / positive.min() > 100
    if finite.size:
        m_lo, m_hi = float(finite.min()), float(finite.max())
    else:
        m_lo, m_hi = 0.0, 1.0
    if use_log:
        r_ticks = [10.0 ** e for e in range(math.floor(math.log10(m_lo)), math.ceil(math.log10(m_hi)) + 1)]
    else:
        r_ticks = _nice_ticks(min(m_lo, 0.0), m_hi if m_hi > m_lo else m_lo + 1.0)
    sr = _Axis(r_ticks[0], r_ticks[-1], bottom, top, log=use_log)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
           f'width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="14">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if title:
        out.append(f'<text x="{WIDTH / 2}" y="32" text-anchor="middle" font-size="18">{title}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
               'fill="none" stroke="black"/>')
    for t in _nice_ticks(0.0, x_hi, 8):
        if t > x_hi:
            continue
        x = sx(t)
        out.append(f'<line x1="{x:.2f}" y1="{bottom}" x2="{x:.2f}" y2="{bottom + 6}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{bottom + 24}" text-anchor="middle">{t:g}</text>')
    for t in y_ticks:
        y = sy(t)
        out.append(f'<line x1="{left - 6}" y1="{y:.2f}" x2="{right}" y2="{y:.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 10}" y="{y + 5:.2f}" text-anchor="end">{t:g}</text>')
    for t in r_ticks:
        y = sr(t)
        out.append(f'<line x1="{right}" y1="{y:.2f}" x2="{right + 6}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{right + 10}" y="{y + 5:.2f}">{t:g}</text>')
    out.append(f'<text x="{(left + right) / 2}" y="{HEIGHT - 25}" text-anchor="middle">iteration</text>')
    out.append(f'<text transform="translate(30,{(top + bottom) / 2}) rotate(-90)" '
               'text-anchor="middle">thickness [cm]</text>')
    out.append(f'<text transform="translate({WIDTH - 25},{(top + bottom) / 2}) rotate(90)" '
               f'text-anchor="middle">metric{" (log scale)" if use_log else ""}</text>')

    legend = []
    for j, name in enumerate(thetas):
        color = PALETTE[j % len(PALETTE)]
        mean, std = trace.mean[name], trace.std[name]
        out.append(_band(its, np.maximum(mean - std, 0.0), mean + std, sx, sy, color))
        out.append(_polyline([(sx(x), sy(v)) for x, v in zip(its, mean)], color))
        kind = "absorber" if j % 2 == 0 else "scintillator"
        legend.append((f"{name} ({kind} {j // 2 + 1})", color, None))
    for name, color, dash in (("objective", "#555555", "8,5"), ("surrogate_pred", "#999999", "2,4")):
        mean, std = metric[name]
        ok = np.isfinite(mean) & (mean > 0 if use_log else True)
        xs, m, s = its[ok], mean[ok], std[ok]
        lo = np.maximum(m - s, m * 1e-3) if use_log else m - s
        out.append(_band(xs, lo, m + s, sx, sr, color))
        out.append(_polyline([(sx(x), sr(v)) for x, v in zip(xs, m)], color, dash))
        legend.append((name, color, dash))

    lx, ly = left + 20, top + 20
    for i, (label, color, dash) in enumerate(legend):
        y = ly + 22 * i
        style = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<line x1="{lx}" y1="{y}" x2="{lx + 30}" y2="{y}" stroke="{color}" stroke-width="2"{style}/>')
        out.append(f'<text x="{lx + 38}" y="{y + 5}">{label}</text>')
    out.append(f'<text x="{right - 10}" y="{top + 20}" text-anchor="end">runs: {trace.runs}</text>')
    out.append("</svg>")
    return "\n".join(s for s in out if s) + "\n"


# ---------------------------------------------------------------- manifest

def build_metadata(result: ReplicaResult) -> dict:
    import numpy
    import scipy

    from .. import __version__
    cfg = result.config
    loops = [cfg.loop_config(r) for r in range(cfg.runs)]
    return {
        "study": cfg.to_dict(),
        "loop": _jsonable(loops[0].to_dict()),
        "profile_overrides": _jsonable(cfg.model_settings()),
        "seeds": [lc.seed for lc in loops],
        "runs_completed": len(result.survivors),
        "runs_requested": cfg.runs,
        "failures": {r.run: r.failure for r in result.records if r.failure is not None},
        "aborted_iterations": {r.run: [row.iteration for row in r.rows if row.status != "ok"]
                               for r in result.records},
        "warnings": result.warnings,
        "decisions": RESOLVED_DECISIONS,
        "wall_clock_seconds": {r.run: round(sum(row.wall_clock for row in r.rows), 3) for r in result.records},
        "versions": {"calo_opt": __version__, "numpy": numpy.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def emit_report(result: ReplicaResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not result.records:
        raise ValueError("nothing to report")
    paths = {name: out / name for name in ("evolution.csv", "evolution_sum.csv", "evolution.svg",
                                           "metadata.json")}
    write_evolution(result.records, paths["evolution.csv"])
    write_summary(result.aggregate, paths["evolution_sum.csv"])
    cfg = result.config
    title = f"{cfg.variant} {cfg.study} study, {cfg.layers} pair(s), {cfg.events} events, TL {'on' if cfg.transfer else 'off'}"
    paths["evolution.svg"].write_text(render_svg(result.aggregate, title))
    paths["metadata.json"].write_text(json.dumps(_jsonable(build_metadata(result)), indent=2) + "\n")
    return paths


def rerender(out_dir: str | Path) -> Path:
    """Rebuild ``evolution.svg`` from ``evolution_sum.csv`` alone."""
    out = Path(out_dir)
    trace = read_summary(out / "evolution_sum.csv")
    title = ""
    meta = out / "metadata.json"
    if meta.is_file():
        study = json.loads(meta.read_text()).get("study", {})
        title = f"{study.get('variant', '')} {study.get('study', '')} study".strip()
    path = out / "evolution.svg"
    path.write_text(render_svg(trace, title))
    return path
