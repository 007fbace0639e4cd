"""Batch experiments: parameter sweeps that regenerate the reference figures.

An experiment names a registered template and optionally overrides its sweep
and grid.  Every sweep point produces one row; rows are written in sweep
order whatever order the workers finish in, so reruns are byte-identical.
Plots are not drawn here; a small matplotlib script reading the CSV is
written next to the data instead.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from . import discrete_limit as dl
from .exact_models import TwoPhaseRates, constant_psi_lambda, counterexample_lambda
from .model_core import Constant, DivisionKernel, Grid, One, SquareWave, as_fraction
from .pde_solver import FloquetError, NonConvergedError, floquet_eigen

log = logging.getLogger(__name__)

LOG2 = math.log(2.0)
EDGE_OFFSET = 1e-6


# ---------------------------------------------------------------------------
# serialisation


def format_cell(v) -> str:
    """Deterministic text for one CSV cell; rationals as ``p/q``."""
    if v is None:
        return ""
    if isinstance(v, Fraction):
        return f"{v.numerator}/{v.denominator}"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def json_value(v):
    if isinstance(v, Fraction):
        return format_cell(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else format_cell(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, dict):
        return {k: json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [json_value(x) for x in v]
    return v


def rows_to_csv(rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> str:
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def rows_to_json(rows: Sequence[dict], meta: Optional[dict] = None) -> str:
    doc = {"rows": [json_value(r) for r in rows]}
    if meta:
        doc["meta"] = json_value(meta)
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# worker pool


def worker_count() -> int:
    raw = os.environ.get("FG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"FG_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def ordered_map(fn: Callable, items: Sequence, workers: Optional[int] = None) -> list:
    """``[fn(x) for x in items]``, optionally on a process pool; order is preserved."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# sweep points


def _eigen_row(kernel: DivisionKernel, grid: Grid, tol: float) -> dict:
    try:
        r = floquet_eigen(kernel, grid, tol=tol, store_profile=False)
        return {"lambda": r.lam, "residual": r.residual, "iterations": r.iterations,
                "lost_fraction": r.lost_fraction, "status": "ok"}
    except NonConvergedError as e:
        return {"lambda": e.lam, "residual": e.residual, "iterations": e.max_iter,
                "lost_fraction": None, "status": "non_converged"}
    except FloquetError as e:
        return {"lambda": None, "residual": None, "iterations": None, "lost_fraction": None,
                "status": f"error: {e}"}


def _grid_for(a: float, period, steps: int, x_max: Optional[float]) -> Grid:
    return Grid.from_period(period, steps, x_max if x_max is not None else a + 3.0 * float(period), a=a)


def _staircase_point(args) -> dict:
    a, tau, T, kappa, steps, x_max, tol = args
    st = dl.staircase(a, tau, T)
    row = {"a": a, "kappa": kappa, "lambda_inf": st.lambda_inf, "N_a": st.N_a, "p_a": st.p_a,
           "a_l": st.a_l, "a_r": st.a_r, "rate_bound": st.rate_bound}
    k = DivisionKernel(kappa, SquareWave(tau, T), One(), float(a))
    row.update(_eigen_row(k, _grid_for(float(a), T, steps, x_max), tol))
    return row


def _log2_point(args) -> dict:
    a, kappa, steps, x_max, tol = args
    k = DivisionKernel(kappa, Constant(1.0), One(), a)
    row = {"a": a, "kappa": kappa, "log2_over_a": LOG2 / a, "oracle": constant_psi_lambda(kappa, One(), a)}
    row.update(_eigen_row(k, _grid_for(a, 1, steps, x_max if x_max is not None else a + 40.0 / kappa + 5), tol))
    return row


def _cex_point(args) -> dict:
    alpha, a1, a2, b1, b2 = args
    return {"b1": b1, "b2": b2, "lambda": counterexample_lambda(TwoPhaseRates(alpha, a1, a2, b1, b2))}


def a_sweep(a_min: float, a_max: float, step: float, exact_edges: bool = False) -> List:
    """Majority ages ``a_min + k*step`` in ``(0, a_max]``.

    By default every point is moved right by 1e-6 so that no point sits on a
    rational step edge; with ``exact_edges`` the points are exact rationals.
    """
    lo, hi, h = as_fraction(a_min), as_fraction(a_max), as_fraction(step)
    if h <= 0 or hi < lo:
        raise ValueError("need step > 0 and a_max >= a_min")
    n = math.floor((hi - lo) / h)
    pts = [lo + k * h for k in range(n + 1)]
    pts = [p for p in pts if p > 0]
    if exact_edges:
        return pts
    return [float(p + as_fraction(EDGE_OFFSET)) for p in pts]


# ---------------------------------------------------------------------------
# experiment specs


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    template: str
    sweep: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    outputs: tuple = ("csv",)

    _FIELDS = ("name", "template", "sweep", "grid", "model", "outputs")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        if not isinstance(d, dict):
            raise ValueError("experiment spec must be a JSON object")
        unknown = set(d) - set(cls._FIELDS)
        if unknown:
            raise ValueError(f"unknown spec field(s) {sorted(unknown)}")
        if "name" not in d:
            raise ValueError("spec needs a name")
        template = d.get("template", d["name"])
        if template not in TEMPLATES:
            raise ValueError(f"unknown template {template!r}; known: {sorted(TEMPLATES)}")
        outputs = tuple(d.get("outputs", ("csv",)))
        bad = set(outputs) - {"csv", "json", "plot"}
        if bad:
            raise ValueError(f"unknown output target(s) {sorted(bad)}")
        tpl = TEMPLATES[template]
        for key, allowed in (("sweep", tpl.sweep_keys), ("grid", ("steps_per_period", "x_max", "tol"))):
            extra = set(d.get(key, {})) - set(allowed)
            if extra:
                raise ValueError(f"{key}: unknown field(s) {sorted(extra)} for template {template}")
        return cls(str(d["name"]), template, dict(d.get("sweep", {})), dict(d.get("grid", {})),
                   dict(d.get("model", {})), outputs)


class Template(NamedTuple):
    build: Callable[[dict, dict], tuple]  # (sweep, grid) -> (point fn, args list, columns, plot kind)
    sweep_keys: tuple
    description: str


def _staircase_template(tau):
    def build(sweep: dict, grid: dict):
        T = sweep.get("T", 1)
        pts = a_sweep(sweep.get("a_min", 0.005), sweep.get("a_max", 1.2), sweep.get("a_step", 0.005),
                      bool(sweep.get("exact_edges", False)))
        kappas = [float(k) for k in sweep.get("kappa", [10, 30, 50, 100])]
        steps = int(grid.get("steps_per_period", 1000))
        x_max, tol = grid.get("x_max"), float(grid.get("tol", 1e-10))
        args = [(a, tau, T, k, steps, x_max, tol) for k in kappas for a in pts]
        cols = ["a", "kappa", "lambda", "lambda_inf", "N_a", "p_a", "a_l", "a_r", "rate_bound",
                "residual", "iterations", "lost_fraction", "status"]
        return _staircase_point, args, cols, ("a", "lambda", "lambda_inf")
    return build


def _log2_build(sweep: dict, grid: dict):
    kappas = [float(k) for k in sweep.get("kappa", [1, 5, 20, 50])]
    a_list = [float(a) for a in sweep.get("a", [1.0])]
    steps = int(grid.get("steps_per_period", 1000))
    x_max, tol = grid.get("x_max"), float(grid.get("tol", 1e-10))
    args = [(a, k, steps, x_max, tol) for a in a_list for k in kappas]
    cols = ["a", "kappa", "lambda", "oracle", "log2_over_a", "residual", "iterations", "lost_fraction", "status"]
    return _log2_point, args, cols, ("kappa", "lambda", "log2_over_a")


def _cex_build(sweep: dict, grid: dict):
    n = int(sweep.get("resolution", 51))
    b1 = np.linspace(*sweep.get("b1_range", (0.0, 5.0)), n)
    b2 = np.linspace(*sweep.get("b2_range", (0.0, 5.0)), n)
    alpha, a1, a2 = float(sweep.get("alpha", 0.5)), float(sweep.get("a1", 10.0)), float(sweep.get("a2", 0.1))
    args = [(alpha, a1, a2, float(x), float(y)) for x in b1 for y in b2]
    return _cex_point, args, ["b1", "b2", "lambda"], ("b1", "b2", "lambda")


_STAIR_KEYS = ("a_min", "a_max", "a_step", "kappa", "T", "exact_edges")
TEMPLATES: Dict[str, Template] = {
    "staircase-tau05": Template(_staircase_template(Fraction(1, 2)), _STAIR_KEYS, "square wave tau=1/2"),
    "staircase-tau033": Template(_staircase_template(Fraction(1, 3)), _STAIR_KEYS, "square wave tau=1/3"),
    "staircase-tau23": Template(_staircase_template(Fraction(2, 3)), _STAIR_KEYS, "square wave tau=2/3"),
    "log2-over-a": Template(_log2_build, ("kappa", "a"), "constant psi, growth rate against kappa"),
    "counterexample-surface": Template(_cex_build, ("a1", "a2", "alpha", "b1_range", "b2_range", "resolution"),
                                       "two-phase model over (b1, b2)"),
}


_PLOT_SCRIPT = '''"""Plot {csv} (generated; needs matplotlib)."""
import csv
import matplotlib.pyplot as plt

with open({csv!r}) as fh:
    rows = list(csv.DictReader(fh))


def num(v):
    if "/" in v:
        p, q = v.split("/")
        return float(p) / float(q)
    return float(v) if v not in ("", "inf") else float("nan")


{body}
plt.savefig({png!r}, dpi=150)
'''

_PLOT_CURVES = '''groups = {{}}
for r in rows:
    groups.setdefault(r.get("kappa", ""), []).append(r)
for key, rs in sorted(groups.items(), key=lambda kv: num(kv[0]) if kv[0] else 0):
    plt.plot([num(r[{x!r}]) for r in rs], [num(r[{y!r}]) for r in rs], ".", ms=2, label="kappa=" + key)
ref = sorted(rows, key=lambda r: num(r[{x!r}]))
plt.plot([num(r[{x!r}]) for r in ref], [num(r[{ref!r}]) for r in ref], "k-", lw=0.8, label={ref!r})
plt.xlabel({x!r})
plt.legend()'''

_PLOT_SURFACE = '''import numpy as np
xs = sorted({{num(r["b1"]) for r in rows}})
ys = sorted({{num(r["b2"]) for r in rows}})
Z = np.array([num(r["lambda"]) for r in rows]).reshape(len(xs), len(ys))
plt.contourf(ys, xs, Z, 30)
plt.colorbar(label="lambda")
plt.xlabel("b2")
plt.ylabel("b1")'''


class ExperimentResult(NamedTuple):
    status: int  # 0 when every point converged
    rows: list
    files: list


def run_experiment(spec: ExperimentSpec, out_dir=".", workers: Optional[int] = None) -> ExperimentResult:
    """Run every sweep point of ``spec`` and write the requested outputs."""
    tpl = TEMPLATES[spec.template]
    fn, args, cols, plot = tpl.build(spec.sweep, spec.grid)
    log.info("experiment %s: %d points", spec.name, len(args))
    rows = ordered_map(fn, args, workers)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    csv_path = out / f"{spec.name}.csv"
    if "csv" in spec.outputs or "plot" in spec.outputs:
        csv_path.write_text(rows_to_csv(rows, cols), encoding="utf-8")
        files.append(csv_path)
    if "json" in spec.outputs:
        p = out / f"{spec.name}.json"
        p.write_text(rows_to_json(rows, {"name": spec.name, "template": spec.template,
                                         "sweep": spec.sweep, "grid": spec.grid}), encoding="utf-8")
        files.append(p)
    if "plot" in spec.outputs:
        if spec.template == "counterexample-surface":
            body = _PLOT_SURFACE
        else:
            body = _PLOT_CURVES.format(x=plot[0], y=plot[1], ref=plot[2])
        p = out / f"{spec.name}_plot.py"
        p.write_text(_PLOT_SCRIPT.format(csv=csv_path.name, png=f"{spec.name}.png", body=body), encoding="utf-8")
        files.append(p)
    failed = sum(1 for r in rows if r.get("status", "ok") != "ok")
    return ExperimentResult(1 if failed else 0, rows, files)


# ---------------------------------------------------------------------------
# non-commuting limits


@dataclass(frozen=True, eq=False)
class LimitsTable:
    a: float
    tau: Fraction
    eps: tuple
    kappa: tuple
    lam: np.ndarray  # lam[i, j] at (eps[i], kappa[j]); nan where a cell failed
    status: tuple  # per-cell status strings, same layout
    kappa_first: float  # proxy for eps -> 0 after kappa -> inf
    eps_first: float  # proxy for kappa -> inf after eps -> 0
    log2_over_a: float
    lambda_inf: float

    @property
    def gap(self) -> float:
        return self.kappa_first - self.eps_first

    @property
    def theory_gap(self) -> float:
        return self.log2_over_a - self.lambda_inf

    def monotone(self, slack: float = 0.0) -> bool:
        """lambda nondecreasing in both eps and kappa (finite cells only)."""
        L = self.lam
        with np.errstate(invalid="ignore"):
            ok_e = np.all(np.nan_to_num(np.diff(L, axis=0), nan=0.0) >= -slack)
            ok_k = np.all(np.nan_to_num(np.diff(L, axis=1), nan=0.0) >= -slack)
        return bool(ok_e and ok_k)

    def rows(self) -> List[dict]:
        return [{"eps": e, "kappa": k, "lambda": self.lam[i, j], "status": self.status[i][j]}
                for i, e in enumerate(self.eps) for j, k in enumerate(self.kappa)]

    def summary(self) -> dict:
        return {"a": self.a, "tau": self.tau, "kappa_first": self.kappa_first, "eps_first": self.eps_first,
                "gap": self.gap, "theory_gap": self.theory_gap, "log2_over_a": self.log2_over_a,
                "lambda_inf": self.lambda_inf}


def _probe_point(args) -> dict:
    a, tau, T, eps, kappa, steps, x_max, tol = args
    k = DivisionKernel(kappa, SquareWave(tau, T, eps), One(), a)
    return _eigen_row(k, _grid_for(a, T, steps, x_max), tol)


def noncommuting_limits_probe(a: float, tau, T=1, eps_list: Sequence[float] = (1e-4, 1e-2, 0.2),
                              kappa_list: Sequence[float] = (50, 100, 200), steps_per_period: int = 1000,
                              x_max: Optional[float] = None, tol: float = 1e-10,
                              workers: Optional[int] = None) -> LimitsTable:
    """Growth rate over an ``(eps, kappa)`` table for the lifted square wave.

    Letting kappa grow at fixed eps > 0 drives the rate towards log2/a
    (divisions are never blocked), while eps -> 0 at fixed kappa recovers the
    square wave, whose large-kappa limit is the staircase value.  Proxies:
    the kappa-first limit is read at the cell with the largest ``eps*kappa``;
    the eps-first limit at the smallest eps and the largest kappa with
    ``eps*kappa <= 0.01`` (the smallest kappa if none qualifies).
    """
    eps = tuple(float(e) for e in eps_list)
    kap = tuple(float(k) for k in kappa_list)
    if not eps or not kap:
        raise ValueError("eps_list and kappa_list must be nonempty")
    if list(eps) != sorted(eps) or list(kap) != sorted(kap):
        raise ValueError("eps_list and kappa_list must be sorted")
    args = [(a, tau, T, e, k, steps_per_period, x_max, tol) for e in eps for k in kap]
    res = ordered_map(_probe_point, args, workers)
    lam = np.array([np.nan if r["lambda"] is None else r["lambda"] for r in res]).reshape(len(eps), len(kap))
    status = tuple(tuple(r["status"] for r in res[i * len(kap):(i + 1) * len(kap)]) for i in range(len(eps)))
    prod = np.outer(eps, kap)
    i, j = np.unravel_index(np.argmax(prod), prod.shape)
    kappa_first = float(lam[i, j])
    ok = [jj for jj, k in enumerate(kap) if eps[0] * k <= 0.01]
    eps_first = float(lam[0, ok[-1] if ok else 0])
    return LimitsTable(float(a), as_fraction(tau), eps, kap, lam, status, kappa_first, eps_first,
                       LOG2 / float(a), dl.lambda_infinity(a, tau, T))
