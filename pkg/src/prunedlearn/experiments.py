"""Monte-Carlo grids over the synthetic oracle-learner setting.

A grid is a :class:`GridSpec`: up to two swept axes, a trial count per cell,
a flat base configuration and a master seed. Every trial draws its own
randomness from ``SeedSequence(master_seed, spawn_key=(cell_key, trial))``,
so trials are independent of execution order and worker count, and adding
trials never changes existing ones.

``cell_key`` indexes the cell on the *seeded* axes only. Axes left out of
``seed_axes`` share random numbers across their values (same oracle, data
and initial direction for every lambda, say), which is a variance-reduction
device for boundary estimates; set ``seed_axes`` to all axes to decouple.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import multiprocessing
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .model import (
    MaskMatrix,
    generate_oracle,
    mask_accuracy,
    r_tilde,
    sample_dataset,
    sigma_for_noise_level,
)
from .pruning import (
    PruneSchedule,
    grasp_prune,
    imp,
    population_test_error,
    test_error,
)
from .stats import affine_fit, threshold_crossing
from .trainer import TrainConfig, agd_train, estimate_rate, log_linear_r2, random_ball_init, run_trial

Row = Dict[str, object]


# --------------------------------------------------------------------------
# Grid specification and seeding


@dataclass(frozen=True)
class GridSpec:
    experiment: str
    axes: Tuple[Tuple[str, Tuple], ...]
    trials_per_cell: int
    base: Tuple[Tuple[str, object], ...]
    master_seed: int = 0
    seed_axes: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if len(self.axes) > 2:
            raise ValueError("a grid sweeps at most two axes")
        if self.trials_per_cell < 1:
            raise ValueError("trials_per_cell must be >= 1")
        names = [a for a, _ in self.axes]
        for name, values in self.axes:
            if len(values) == 0:
                raise ValueError(f"axis {name!r} has no values")
        if self.seed_axes is not None and not set(self.seed_axes) <= set(names):
            raise ValueError(f"seed_axes {self.seed_axes} not among axes {names}")

    @classmethod
    def build(cls, experiment: str, axes: Dict[str, Sequence], trials_per_cell: int, base: Dict,
              master_seed: int = 0, seed_axes: Optional[Sequence[str]] = None) -> "GridSpec":
        return cls(
            experiment,
            tuple((k, tuple(v)) for k, v in axes.items()),
            int(trials_per_cell),
            tuple(sorted(base.items())),
            int(master_seed),
            None if seed_axes is None else tuple(seed_axes),
        )

    @property
    def params(self) -> Dict:
        return dict(self.base)

    @property
    def axis_names(self) -> List[str]:
        return [a for a, _ in self.axes]

    def cells(self) -> List[Dict]:
        names = self.axis_names
        return [dict(zip(names, combo)) for combo in itertools.product(*(v for _, v in self.axes))]

    def cell_key(self, cell: Dict) -> int:
        """Index of ``cell`` on the grid formed by the seeded axes only."""
        seeded = self.axis_names if self.seed_axes is None else list(self.seed_axes)
        key = 0
        for name, values in self.axes:
            if name in seeded:
                key = key * len(values) + list(values).index(cell[name])
        return key

    def to_json_dict(self) -> Dict:
        return {
            "experiment": self.experiment,
            "axes": [[k, list(v)] for k, v in self.axes],
            "trials_per_cell": self.trials_per_cell,
            "base": dict(self.base),
            "master_seed": self.master_seed,
            "seed_axes": None if self.seed_axes is None else list(self.seed_axes),
        }

    @classmethod
    def from_json_dict(cls, doc: Dict) -> "GridSpec":
        return cls.build(doc["experiment"], {k: v for k, v in doc["axes"]}, doc["trials_per_cell"],
                         {k: _tuplify(v) for k, v in doc["base"].items()}, doc["master_seed"],
                         doc.get("seed_axes"))

    def spec_hash(self) -> str:
        text = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def _tuplify(v):
    return tuple(v) if isinstance(v, list) else v


def trial_seed(master_seed: int, cell_key: int, trial: int) -> np.random.SeedSequence:
    """Counter-based per-trial seed: depends only on (master, cell, trial)."""
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(cell_key), int(trial)))


def _children(seed: np.random.SeedSequence, n: int) -> List[np.random.SeedSequence]:
    # Fresh SeedSequence so repeated calls on the same seed give the same children.
    return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key).spawn(n)


# --------------------------------------------------------------------------
# Experiment registry


@dataclass(frozen=True)
class Experiment:
    name: str
    axes: Tuple[Tuple[str, str], ...]          # (axis name, config key holding its values)
    seed_axes: Tuple[str, ...]
    trial: Callable[[Dict, np.random.SeedSequence], List[Row]]
    trial_fields: Tuple[str, ...]
    aggregate: Callable[["GridSpec", List[Row]], List[Row]]
    summarize: Callable[["GridSpec", List[Row]], Dict]
    sub_field: Optional[str] = None            # per-trial sub-row index (IMP rounds)


EXPERIMENTS: Dict[str, Experiment] = {}


def _register(exp: Experiment) -> Experiment:
    EXPERIMENTS[exp.name] = exp
    return exp


def make_spec(name: str, config: Dict) -> GridSpec:
    """GridSpec for a registered experiment from a resolved flat configuration."""
    exp = EXPERIMENTS[name]
    axes = {axis: tuple(config[key]) for axis, key in exp.axes}
    base = {k: v for k, v in config.items() if k not in {key for _, key in exp.axes}
            and k not in ("trials", "seed", "threads", "out_dir", "paper_scale")}
    return GridSpec.build(name, axes, config["trials"], base, config.get("seed", 0), exp.seed_axes)


# --------------------------------------------------------------------------
# Runner


@dataclass(frozen=True)
class GridResult:
    spec: GridSpec
    trials: Tuple[Row, ...]
    cells: Tuple[Row, ...]
    summary: Dict = field(default_factory=dict)
    code_version: str = __version__

    @property
    def spec_hash(self) -> str:
        return self.spec.spec_hash()

    def trials_csv(self) -> str:
        return rows_to_csv(self.trials)

    def cells_csv(self) -> str:
        return rows_to_csv(self.cells)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(rows: Sequence[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if rows:
        header = list(rows[0].keys())
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in header])
    return buf.getvalue()


def _run_one(spec: GridSpec, cell_index: int, trial: int) -> List[Row]:
    exp = EXPERIMENTS[spec.experiment]
    cell = spec.cells()[cell_index]
    params = {**spec.params, **cell}
    seed = trial_seed(spec.master_seed, spec.cell_key(cell), trial)
    head = {"cell": cell_index, "trial": trial, **cell}
    try:
        rows = exp.trial(params, seed)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as err:
        blank = {f: math.nan for f in exp.trial_fields}
        blank["reason"] = f"error: {err}".replace(",", ";")
        rows = [blank]
    out = []
    for r in rows:
        row = dict(head)
        if exp.sub_field:
            row[exp.sub_field] = r.get(exp.sub_field, 0)
        row.update({f: r.get(f, math.nan) for f in exp.trial_fields})
        out.append(row)
    return out


_WORKER_SPEC: Optional[GridSpec] = None


def _worker_init(spec_doc):
    global _WORKER_SPEC
    threadpool_limits(1)
    _WORKER_SPEC = GridSpec.from_json_dict(spec_doc)


def _worker_task(task):
    ci, t = task
    return task, _run_one(_WORKER_SPEC, ci, t)


def run_grid(
    spec: GridSpec,
    threads: int = 1,
    checkpoint: Optional[str] = None,
    progress: Optional[Callable[[int, int], None]] = None,
) -> GridResult:
    """Run every trial of ``spec`` and reduce to per-cell aggregates.

    ``threads`` worker processes share the trials; each runs BLAS single
    threaded, so results do not depend on the worker count. With
    ``checkpoint`` (a JSON-lines path) finished trials are persisted as they
    complete and skipped when the same grid is run again.
    """
    if spec.experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {spec.experiment!r}")
    n_cells = len(spec.cells())
    tasks = [(ci, t) for ci in range(n_cells) for t in range(spec.trials_per_cell)]
    done: Dict[Tuple[int, int], List[Row]] = {}
    if checkpoint:
        done = _load_checkpoint(checkpoint, spec.spec_hash())
    todo = [task for task in tasks if task not in done]

    sink = open(checkpoint, "a+", encoding="utf-8") if checkpoint else None
    if sink and sink.tell() > 0:
        sink.seek(sink.tell() - 1)
        if sink.read(1) != "\n":
            sink.write("\n")  # close off a record torn by an interrupted run
    try:
        def record(task, rows):
            done[task] = rows
            if sink:
                sink.write(json.dumps({"spec": spec.spec_hash(), "task": list(task), "rows": rows}) + "\n")
                sink.flush()
            if progress:
                progress(len(done), len(tasks))

        if threads > 1 and len(todo) > 1:
            ctx = multiprocessing.get_context("fork" if "fork" in multiprocessing.get_all_start_methods()
                                              else "spawn")
            with ctx.Pool(threads, initializer=_worker_init, initargs=(spec.to_json_dict(),)) as pool:
                for task, rows in pool.imap_unordered(_worker_task, todo):
                    record(tuple(task), rows)
        else:
            with threadpool_limits(1):
                for task in todo:
                    record(task, _run_one(spec, *task))
    finally:
        if sink:
            sink.close()

    trials = [row for task in tasks for row in done[task]]
    exp = EXPERIMENTS[spec.experiment]
    cells = exp.aggregate(spec, trials)
    return GridResult(spec, tuple(trials), tuple(cells), exp.summarize(spec, cells))


def _load_checkpoint(path: str, spec_hash: str) -> Dict[Tuple[int, int], List[Row]]:
    out: Dict[Tuple[int, int], List[Row]] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError:
                    continue  # record torn by an interrupted run
                if doc.get("spec") == spec_hash:
                    out[tuple(doc["task"])] = doc["rows"]
    except FileNotFoundError:
        pass
    return out


# --------------------------------------------------------------------------
# Shared helpers


def _train_config(p: Dict, **changes) -> TrainConfig:
    cfg = TrainConfig(eta=p["eta"], beta=p["beta"], max_iters=p["max_iters"],
                      rel_change_tol=p["rel_change_tol"])
    return cfg.replace(**changes) if changes else cfg


def jittered_sparsities(r_target: float, K: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """r_j drawn uniformly from the integers in [0.9 r, 1.1 r]."""
    lo, hi = math.ceil(0.9 * r_target - 1e-9), math.floor(1.1 * r_target + 1e-9)
    lo = max(lo, 1)
    if hi < lo:
        hi = lo
    if hi > d:
        raise ValueError(f"infeasible r_tilde={r_target} for d={d}")
    return rng.integers(lo, hi + 1, size=K)


def _noisy_oracle(oracle, level: float, seed):
    if level <= 0:
        return oracle
    ref = sample_dataset(oracle, 20_000, seed)
    return oracle.with_noise(sigma_for_noise_level(oracle, level, ref))


def _group(trials: Sequence[Row], keys: Sequence[str]) -> Dict[Tuple, List[Row]]:
    groups: Dict[Tuple, List[Row]] = {}
    for r in trials:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    return groups


def _ok(rows: Sequence[Row]) -> List[Row]:
    return [r for r in rows if not str(r.get("reason", "")).startswith("error")]


def _mean(values) -> float:
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=float)
    return float(v.mean()) if v.size else math.nan


def _std(values) -> float:
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=float)
    return float(v.std(ddof=1)) if v.size > 1 else math.nan


def _success_cells(spec: GridSpec, trials: Sequence[Row]) -> List[Row]:
    out = []
    by_cell = _group(trials, ["cell"])
    for ci, cell in enumerate(spec.cells()):
        rows = by_cell.get((ci,), [])
        ok = _ok(rows)
        succ = [float(r["success"]) for r in ok]
        out.append({
            "cell": ci, **cell,
            "n_trials": len(ok),
            "n_failed": len(rows) - len(ok),
            "success_rate": float(np.mean(succ)) if succ else math.nan,
            "mean_rel_error": _mean(r["final_rel_error"] for r in ok),
            "std_rel_error": _std(r["final_rel_error"] for r in ok),
            "mean_iterations": _mean(r["iterations"] for r in ok),
            "mean_r_tilde": _mean(r["r_tilde_actual"] for r in ok),
        })
    return out


def interpolated_crossing(values, rates, level: float = 0.9, direction: str = "down"):
    """Level crossing of a success-rate curve, linearly interpolated.

    ``direction="down"``: the curve falls with the axis; returns the
    largest grid value at or above ``level`` moved toward the first later
    value below it. ``direction="up"``: the curve rises; returns the
    smallest grid value at or above ``level`` moved back toward the last
    earlier value below it. ``None`` when no value reaches ``level``.
    """
    v = list(values)
    r = list(rates)
    if direction == "down":
        ok = [i for i, x in enumerate(r) if x >= level]
        if not ok:
            return None
        i = max(ok)
        if i + 1 >= len(v):
            return float(v[i])
        a, b = r[i], r[i + 1]
        return float(v[i] + (a - level) / (a - b) * (v[i + 1] - v[i]))
    ok = [i for i, x in enumerate(r) if x >= level]
    if not ok:
        return None
    i = min(ok)
    if i == 0:
        return float(v[0])
    a, b = r[i - 1], r[i]
    return float(v[i] - (b - level) / (b - a) * (v[i] - v[i - 1]))


def _fit_dict(x, y) -> Dict:
    if len(x) < 2:
        return {"slope": math.nan, "intercept": math.nan, "r2": math.nan, "n": len(x)}
    f = affine_fit(x, y)
    return {"slope": f.slope, "intercept": f.intercept, "r2": f.r2, "n": f.n}


def _monotone(seq, increasing: bool) -> bool:
    pairs = zip(seq, seq[1:])
    return all(b >= a for a, b in pairs) if increasing else all(b <= a for a, b in zip(seq, seq[1:]))


# --------------------------------------------------------------------------
# Radius phase diagram


def _phase_trial(p: Dict, seed) -> List[Row]:
    s_oracle, s_trial = _children(seed, 2)
    rng = np.random.default_rng(s_oracle)
    r = jittered_sparsities(p["r_tilde"], p["K"], p["d"], rng)
    oracle = generate_oracle(p["d"], p["K"], r, p["overlap_mode"], seed=rng)
    res = run_trial(oracle, p["N"], oracle.mask, p["lam"], _train_config(p), p["success_tol"], s_trial)
    return [{"success": res.success, "final_rel_error": res.final_rel_error, "iterations": res.iterations,
             "reason": res.reason, "r_tilde_actual": r_tilde(oracle.mask)}]


def _phase_summary(spec: GridSpec, cells: List[Row]) -> Dict:
    p = spec.params
    level = p["success_level"]
    lams = dict(spec.axes)["lam"]
    rts, grid_star, interp_star = [], [], []
    for rt in dict(spec.axes)["r_tilde"]:
        rates = [c["success_rate"] for c in cells if c["r_tilde"] == rt]
        rts.append(rt)
        grid_star.append(threshold_crossing(lams, rates, level, largest=True))
        interp_star.append(interpolated_crossing(lams, rates, level, "down"))
    have = [(math.sqrt(rt), s) for rt, s in zip(rts, interp_star) if s is not None]
    return {
        "level": level,
        "r_tilde": rts,
        "lam_star_grid": grid_star,
        "lam_star": interp_star,
        "nonincreasing": all(s is not None for s in interp_star) and _monotone(interp_star, False),
        "fit_lam_star_vs_sqrt_r_tilde": _fit_dict([a for a, _ in have], [b for _, b in have]),
    }


_register(Experiment(
    "radius_phase_diagram",
    (("r_tilde", "r_tilde_values"), ("lam", "lam_values")),
    ("r_tilde",),
    _phase_trial,
    ("success", "final_rel_error", "iterations", "reason", "r_tilde_actual"),
    _success_cells,
    _phase_summary,
))


# --------------------------------------------------------------------------
# Convergence-rate sweep


def _rate_trial(p: Dict, seed) -> List[Row]:
    s_oracle, s_data, s_init = _children(seed, 3)
    r = int(round(p["r_tilde"]))
    oracle = generate_oracle(p["d"], p["K"], [r] * p["K"], p["overlap_mode"], seed=s_oracle)
    data = sample_dataset(oracle, p["N"], s_data)
    W0 = random_ball_init(oracle, p["lam"], oracle.mask, s_init)
    trace = agd_train(data, oracle.mask, W0, _train_config(p), oracle)
    try:
        nu = estimate_rate(trace, p["success_tol"])
        r2 = log_linear_r2(trace, p["success_tol"])
    except ValueError:
        nu = r2 = math.nan
    return [{"rate": nu, "log_linear_r2": r2, "final_rel_error": trace.final_rel_error,
             "iterations": trace.n_iterations, "reason": trace.reason, "r_tilde_actual": r_tilde(oracle.mask)}]


def _rate_cells(spec: GridSpec, trials: Sequence[Row]) -> List[Row]:
    out = []
    by_cell = _group(trials, ["cell"])
    for ci, cell in enumerate(spec.cells()):
        rows = _ok(by_cell.get((ci,), []))
        rates = [r["rate"] for r in rows if np.isfinite(r["rate"])]
        out.append({
            "cell": ci, **cell,
            "n_trials": len(rows),
            "n_rated": len(rates),
            "mean_rate": _mean(rates),
            "std_rate": _std(rates),
            "mean_log_linear_r2": _mean(r["log_linear_r2"] for r in rows),
            "mean_rel_error": _mean(r["final_rel_error"] for r in rows),
            "mean_iterations": _mean(r["iterations"] for r in rows),
            "mean_r_tilde": _mean(r["r_tilde_actual"] for r in rows),
        })
    return out


def _rate_summary(spec: GridSpec, cells: List[Row]) -> Dict:
    out: Dict = {"fits": {}}
    for beta in dict(spec.axes)["beta"]:
        sel = [c for c in cells if c["beta"] == beta and np.isfinite(c["mean_rate"])]
        out["fits"][repr(float(beta))] = _fit_dict([1.0 / math.sqrt(c["r_tilde"]) for c in sel],
                                                   [c["mean_rate"] for c in sel])
    return out


_register(Experiment(
    "rate_sweep",
    (("r_tilde", "r_tilde_values"), ("beta", "beta_values")),
    ("r_tilde",),
    _rate_trial,
    ("rate", "log_linear_r2", "final_rel_error", "iterations", "reason", "r_tilde_actual"),
    _rate_cells,
    _rate_summary,
))


# --------------------------------------------------------------------------
# Sample complexity


def _sample_trial(p: Dict, seed) -> List[Row]:
    s_oracle, s_trial = _children(seed, 2)
    rng = np.random.default_rng(s_oracle)
    if p["mode"] == "fixed_r":
        r = np.full(p["K"], p["r"])
        mode = p["overlap_mode"]
    else:
        r = jittered_sparsities(p["r_tilde"], p["K"], p["d"], rng)
        mode = p["overlap_mode"]
    oracle = generate_oracle(p["d"], p["K"], r, mode, seed=rng)
    res = run_trial(oracle, p["N"], oracle.mask, p["lam"], _train_config(p), p["success_tol"], s_trial)
    return [{"success": res.success, "final_rel_error": res.final_rel_error, "iterations": res.iterations,
             "reason": res.reason, "r_tilde_actual": r_tilde(oracle.mask)}]


def _sample_summary(spec: GridSpec, cells: List[Row]) -> Dict:
    p = spec.params
    axes = dict(spec.axes)
    Ns = axes["N"]
    if p["mode"] == "fixed_r":
        table = []
        for mode in axes["overlap_mode"]:
            sel = [c for c in cells if c["overlap_mode"] == mode]
            table.append({"overlap_mode": mode, "mean_r_tilde": _mean(c["mean_r_tilde"] for c in sel),
                          "mean_rel_error": [c["mean_rel_error"] for c in sel]})
        return {"mode": "fixed_r", "N": list(Ns), "by_architecture": table}
    level = p["success_level"]
    rts, grid_star, interp_star = [], [], []
    for rt in axes["r_tilde"]:
        rates = [c["success_rate"] for c in cells if c["r_tilde"] == rt]
        rts.append(rt)
        grid_star.append(threshold_crossing(Ns, rates, level, largest=False))
        interp_star.append(interpolated_crossing(Ns, rates, level, "up"))
    have = [(rt, s) for rt, s in zip(rts, interp_star) if s is not None]
    return {
        "mode": "jittered",
        "level": level,
        "r_tilde": rts,
        "N_star_grid": grid_star,
        "N_star": interp_star,
        "nondecreasing": all(s is not None for s in interp_star) and _monotone(interp_star, True),
        "fit_N_star_vs_r_tilde": _fit_dict([a for a, _ in have], [b for _, b in have]),
    }


_register(Experiment(
    "sample_complexity_diagram",
    (("r_tilde", "r_tilde_values"), ("N", "N_values")),
    ("r_tilde",),
    _sample_trial,
    ("success", "final_rel_error", "iterations", "reason", "r_tilde_actual"),
    _success_cells,
    _sample_summary,
))

_register(Experiment(
    "sample_complexity_fixed_r",
    (("overlap_mode", "overlap_modes"), ("N", "N_values")),
    ("overlap_mode",),
    _sample_trial,
    ("success", "final_rel_error", "iterations", "reason", "r_tilde_actual"),
    _success_cells,
    _sample_summary,
))


# --------------------------------------------------------------------------
# Noise sweep


def _noise_trial(p: Dict, seed) -> List[Row]:
    s_oracle, s_ref, s_data, s_init = _children(seed, 4)
    r = int(round(p["r_tilde"]))
    oracle = generate_oracle(p["d"], p["K"], [r] * p["K"], p["overlap_mode"], seed=s_oracle)
    oracle = _noisy_oracle(oracle, p["noise_level"], s_ref)
    data = sample_dataset(oracle, p["N"], s_data)
    W0 = random_ball_init(oracle, p["lam"], oracle.mask, s_init)
    trace = agd_train(data, oracle.mask, W0, _train_config(p), oracle)
    return [{"final_rel_error": trace.final_rel_error, "iterations": trace.n_iterations,
             "reason": trace.reason, "sigma": oracle.noise_sigma, "r_tilde_actual": r_tilde(oracle.mask)}]


def _noise_cells(spec: GridSpec, trials: Sequence[Row]) -> List[Row]:
    out = []
    by_cell = _group(trials, ["cell"])
    for ci, cell in enumerate(spec.cells()):
        rows = _ok(by_cell.get((ci,), []))
        errs = [r["final_rel_error"] for r in rows if r["reason"] != "diverged"]
        mean, std = _mean(errs), _std(errs)
        out.append({
            "cell": ci, **cell,
            "n_trials": len(rows),
            "n_diverged": len(rows) - len(errs),
            "mean_rel_error": mean,
            "std_rel_error": std,
            "std_over_mean": std / mean if mean and np.isfinite(std) else math.nan,
            "mean_iterations": _mean(r["iterations"] for r in rows),
            "mean_sigma": _mean(r["sigma"] for r in rows),
            "mean_r_tilde": _mean(r["r_tilde_actual"] for r in rows),
        })
    return out


def _noise_summary(spec: GridSpec, cells: List[Row]) -> Dict:
    axes = dict(spec.axes)
    levels = sorted(axes["noise_level"])
    fits = {}
    for lv in levels:
        sel = [c for c in cells if c["noise_level"] == lv]
        if lv > 0:
            fits[repr(float(lv))] = _fit_dict([math.sqrt(c["r_tilde"]) for c in sel],
                                              [c["mean_rel_error"] for c in sel])
    ratios = []
    for lv in levels:
        if lv > 0 and 2 * lv in levels:
            for rt in axes["r_tilde"]:
                a = [c["mean_rel_error"] for c in cells if c["noise_level"] == lv and c["r_tilde"] == rt][0]
                b = [c["mean_rel_error"] for c in cells if c["noise_level"] == 2 * lv and c["r_tilde"] == rt][0]
                ratios.append({"r_tilde": rt, "level": lv, "ratio": b / a})
    return {"fits_vs_sqrt_r_tilde": fits, "doubling_ratios": ratios}


_register(Experiment(
    "noise_sweep",
    (("r_tilde", "r_tilde_values"), ("noise_level", "noise_levels")),
    ("r_tilde",),
    _noise_trial,
    ("final_rel_error", "iterations", "reason", "sigma", "r_tilde_actual"),
    _noise_cells,
    _noise_summary,
))


# --------------------------------------------------------------------------
# Inaccurate masks from GraSP


def _first_below(values: np.ndarray, threshold: float) -> float:
    hit = np.flatnonzero(values <= threshold)
    return float(hit[0]) if hit.size else math.nan


def _grasp_trial(p: Dict, seed) -> List[Row]:
    s_oracle, s_data, s_warm, s_init, s_test, s_lam, s_ref = _children(seed, 7)
    K, d = p["K"], p["d"]
    oracle = generate_oracle(d, K, [p["r"]] * K, p["overlap_mode"], seed=s_oracle)
    oracle = _noisy_oracle(oracle, p["noise_level"], s_ref)
    data = sample_dataset(oracle, p["N"], s_data)
    full = MaskMatrix.full(d, K)
    lo, hi = p["warm_lam_range"]
    lam_warm = float(np.random.default_rng(s_lam).uniform(lo, hi))
    W_warm = random_ball_init(oracle, lam_warm, full, s_warm)
    warm_cfg = _train_config(p, max_iters=p["warmup_iters"])
    mask = grasp_prune(data, full, warm_cfg, p["ratio"], W0=W_warm, selection=p["grasp_selection"])
    acc = mask_accuracy(mask, oracle.mask, permute=True)
    W0 = random_ball_init(oracle, p["lam"], mask, s_init, check=False)
    thresholds = tuple(p["iteration_thresholds"])
    trace = agd_train(data, mask, W0, _train_config(p),
                      monitor=lambda W: population_test_error(W, oracle, noisy=False))
    row = {
        "pruning_ratio": p["ratio"],
        "lam_warm": lam_warm,
        "mask_accuracy": acc,
        "test_error": test_error(trace.final_weights, oracle, p["N_test"], s_test),
        "iterations": trace.n_iterations,
        "reason": trace.reason,
    }
    for i, thr in enumerate(thresholds):
        row[f"iters_to_thr{i}"] = _first_below(trace.monitor, thr)
    return [row]


GRASP_FIELDS = ("pruning_ratio", "lam_warm", "mask_accuracy", "test_error", "iterations", "reason",
                "iters_to_thr0", "iters_to_thr1", "iters_to_thr2")


def accuracy_bucket(acc: float, width: float) -> float:
    """Lower edge of the width-``width`` bucket containing ``acc`` (1.0 has its own bucket)."""
    if acc >= 1.0:
        return 1.0
    return round(math.floor(acc / width + 1e-9) * width, 10)


def _grasp_cells(spec: GridSpec, trials: Sequence[Row]) -> List[Row]:
    p = spec.params
    width = p["bucket_width"]
    out = []
    rows = _ok(trials)
    groups: Dict[Tuple, List[Row]] = {}
    for r in rows:
        groups.setdefault((r["ratio"], r["N"], accuracy_bucket(r["mask_accuracy"], width)), []).append(r)
    for ratio, N, lo in sorted(groups):
        g = groups[(ratio, N, lo)]
        reported = len(g) >= p["min_bucket_trials"]
        entry = {
            "ratio": ratio, "N": N,
            "bucket_lo": lo,
            "bucket_hi": lo if lo >= 1.0 else round(lo + width, 10),
            "n_trials": len(g),
            "reported": int(reported),
            "mean_test_error": _mean(r["test_error"] for r in g) if reported else math.nan,
            "std_test_error": _std(r["test_error"] for r in g) if reported else math.nan,
            "mean_mask_accuracy": _mean(r["mask_accuracy"] for r in g),
        }
        for i in range(len(p["iteration_thresholds"])):
            entry[f"mean_iters_to_thr{i}"] = _mean(r[f"iters_to_thr{i}"] for r in g) if reported else math.nan
        out.append(entry)
    return out


def _grasp_summary(spec: GridSpec, cells: List[Row]) -> Dict:
    p = spec.params
    axes = dict(spec.axes)
    target = float(p["focus_bucket"])
    focus = {}
    for ratio in axes["ratio"]:
        for N in axes["N"]:
            hit = [c for c in cells if c["ratio"] == ratio and c["N"] == N
                   and abs(c["bucket_lo"] - target) < 1e-9 and c["reported"]]
            focus[f"{ratio}|{N}"] = hit[0]["mean_test_error"] if hit else None
    required = {}
    for ratio in axes["ratio"]:
        ok = [N for N in sorted(axes["N"]) if focus[f"{ratio}|{N}"] is not None
              and focus[f"{ratio}|{N}"] <= p["required_test_error"]]
        required[repr(float(ratio))] = ok[0] if ok else None
    return {"focus_bucket": target, "focus_mean_test_error": focus, "required_N": required}


_register(Experiment(
    "inaccurate_mask_sweep",
    (("ratio", "ratio_values"), ("N", "N_values")),
    (),
    _grasp_trial,
    GRASP_FIELDS,
    _grasp_cells,
    _grasp_summary,
))


# --------------------------------------------------------------------------
# IMP sweep


def _imp_trial(p: Dict, seed) -> List[Row]:
    s_oracle, s_ref, s_data, s_init, s_test = _children(seed, 5)
    K, d = p["K"], p["d"]
    oracle = generate_oracle(d, K, [p["r"]] * K, p["overlap_mode"], seed=s_oracle)
    oracle = _noisy_oracle(oracle, p["noise_level"], s_ref)
    data = sample_dataset(oracle, p["N"], s_data)
    W_init = random_ball_init(oracle, p["lam"], MaskMatrix.full(d, K), s_init)
    schedule = PruneSchedule(p["rounds"], p["per_round_fraction"], p["rewind"])
    test_seed = int(s_test.generate_state(1)[0])
    records = imp(data, schedule, _train_config(p), W_init, oracle, p["N_test"], test_seed)
    return [{"round": rec.round, "pruning_ratio": rec.pruning_ratio, "mask_accuracy": rec.mask_accuracy,
             "test_error": rec.test_error, "iterations": rec.iterations, "reason": rec.note or "ok",
             "sigma": oracle.noise_sigma} for rec in records]


def _imp_cells(spec: GridSpec, trials: Sequence[Row]) -> List[Row]:
    out = []
    rows = _ok(trials)
    for (N, rnd), g in sorted(_group(rows, ["N", "round"]).items()):
        out.append({
            "N": N, "round": rnd,
            "n_trials": len(g),
            "mean_pruning_ratio": _mean(r["pruning_ratio"] for r in g),
            "mean_test_error": _mean(r["test_error"] for r in g),
            "std_test_error": _std(r["test_error"] for r in g),
            "mean_mask_accuracy": _mean(r["mask_accuracy"] for r in g),
            "mean_iterations": _mean(r["iterations"] for r in g),
            "mean_sigma": _mean(r["sigma"] for r in g),
        })
    return out


def _imp_summary(spec: GridSpec, cells: List[Row]) -> Dict:
    out = {}
    for N in dict(spec.axes)["N"]:
        sel = sorted((c for c in cells if c["N"] == N), key=lambda c: c["round"])
        ratios = [c["mean_pruning_ratio"] for c in sel]
        errs = [c["mean_test_error"] for c in sel]
        out[str(N)] = {"ratio": ratios, "test_error": errs, "noise_floor": _mean(c["mean_sigma"] for c in sel)}
    return out


_register(Experiment(
    "imp_sweep",
    (("N", "N_values"),),
    (),
    _imp_trial,
    ("round", "pruning_ratio", "mask_accuracy", "test_error", "iterations", "reason", "sigma"),
    _imp_cells,
    _imp_summary,
    sub_field="round",
))
