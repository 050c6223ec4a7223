"""Experiment orchestration: configs, single runs, sweeps and their CSV outputs."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .baselines import FL_KINDS, METHODS, Alternate, DualOptim, FLAdapted, Joint
from .core import AdamWParams, MuonParams
from .diagnostics import DEFAULT_BURN_IN, SimilarityTrace, StepRecord, gradient_ema_similarity, traces_csv, update_similarity
from .dualoptim_plus import BASE_INPUTS, BASE_TIMINGS, DualOptimPlus
from .numkit import NonFiniteError, digest
from .quant8 import SUBSETS, QuantizedOptimizer
from .schedule import LrSchedule, default_warmup, make_schedule
from .tasks import TASK_KINDS, make_task

logger = logging.getLogger(__name__)

FAST = (0.9, 0.95)
SLOW = (0.99, 0.999)
MOMENTUM_SETS = {"FF": (FAST, FAST), "FS": (FAST, SLOW), "SF": (SLOW, FAST), "SS": (SLOW, SLOW)}


class ConfigError(ValueError):
    """A config key is unknown or its value cannot be used."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass
class RunConfig:
    task: str = "conflicting_quadratic"
    method: str = "dualoptim_plus"
    mode: str = "adamw"
    seed: int = 0
    dim: int = 0  # 0: the task's default
    shape: str = ""  # e.g. "8x8"; needed for muon mode
    total_steps: int = 300
    forget_freq: int = 1
    retain_freq: int = 5
    frequencies: str = ""  # comma list for tasks with more than two objectives
    peak_lr: float = 1e-2
    warmup_steps: int = -1  # -1: first of num_epochs epochs
    num_epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    momentum: float = 0.95
    ns_iterations: int = 5
    momentum_set: str = ""  # FF, FS, SF, SS: (delta set, base set)
    base_beta1: float = -1.0  # -1: same as beta1
    base_beta2: float = -1.0
    base_update_timing: str = "after_param"
    base_update_input: str = "grad"
    quantize_states: str = "none"
    block_size: int = 256
    forget_weight: float = 1.0
    clip_radius: float = 10.0
    noise: float = 0.1
    drift: float = 0.45
    drift_period: int = 50
    diagnostics: bool = False

    def validate(self) -> "RunConfig":
        checks = [
            ("task", self.task in TASK_KINDS, f"must be one of {TASK_KINDS}"),
            ("method", self.method in METHODS, f"must be one of {METHODS}"),
            ("mode", self.mode in ("adamw", "muon"), "must be 'adamw' or 'muon'"),
            ("total_steps", self.total_steps >= 1, "must be positive"),
            ("forget_freq", self.forget_freq >= 1, "must be >= 1"),
            ("retain_freq", self.retain_freq >= 0, "must be >= 0"),
            ("peak_lr", self.peak_lr >= 0, "must be nonnegative"),
            ("num_epochs", self.num_epochs >= 1, "must be >= 1"),
            ("base_update_timing", self.base_update_timing in BASE_TIMINGS, f"must be one of {BASE_TIMINGS}"),
            ("base_update_input", self.base_update_input in BASE_INPUTS, f"must be one of {BASE_INPUTS}"),
            ("quantize_states", self.quantize_states in SUBSETS, f"must be one of {SUBSETS}"),
            ("block_size", self.block_size >= 1, "must be positive"),
            ("momentum_set", self.momentum_set in ("",) + tuple(MOMENTUM_SETS), "must be FF, FS, SF or SS"),
            ("warmup_steps", -1 <= self.warmup_steps <= self.total_steps, "must be -1 or in 0..total_steps"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, f"{msg}, got {getattr(self, key)!r}")
        if self.mode == "muon" and self.method in FL_KINDS:
            raise ConfigError("method", f"{self.method!r} is only defined for adamw mode")
        if self.period_frequencies()[0] + sum(self.period_frequencies()[1:]) > self.total_steps:
            raise ConfigError("total_steps", "must cover at least one full forget/retain period")
        try:
            self.param_shape()
        except ValueError as exc:
            raise ConfigError("shape", str(exc)) from None
        return self

    def param_shape(self):
        if self.shape:
            try:
                return tuple(int(s) for s in self.shape.lower().split("x"))
            except ValueError:
                raise ValueError(f"expected e.g. '8x8', got {self.shape!r}") from None
        if self.mode == "muon":
            side = int(np.sqrt(self.dim or 64))
            return (side, side)
        return None

    def period_frequencies(self):
        if self.frequencies:
            try:
                return tuple(int(f) for f in self.frequencies.split(","))
            except ValueError:
                raise ConfigError("frequencies", f"expected comma-separated ints, got {self.frequencies!r}") from None
        if self.task == "three_task":
            return (1, 1, 1)
        return (self.forget_freq, self.retain_freq)

    def warmup(self) -> int:
        if self.warmup_steps >= 0:
            return self.warmup_steps
        return default_warmup(self.total_steps, self.num_epochs)

    def betas(self):
        """``(delta_betas, base_betas)`` after applying momentum-set and base overrides."""
        delta = (self.beta1, self.beta2)
        base = delta
        if self.momentum_set:
            delta, base = MOMENTUM_SETS[self.momentum_set]
        if self.base_beta1 >= 0:
            base = (self.base_beta1, base[1])
        if self.base_beta2 >= 0:
            base = (base[0], self.base_beta2)
        return delta, base

    def echo(self) -> str:
        """Config file text that parses back to this config."""
        lines = ["[run]"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def coerce(key: str, raw):
    """Convert a raw string to the type of RunConfig field ``key``."""
    if key not in _FIELD_TYPES:
        raise ConfigError(key, "unknown key")
    typ = _FIELD_TYPES[key]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ}") from None
    return raw


def parse_config_text(text: str) -> Dict[str, Dict[str, str]]:
    """Parse ``key = value`` lines grouped by optional ``[section]`` headers.

    Lines before any header belong to ``run``. ``#`` and ``;`` start comments.
    """
    sections: Dict[str, Dict[str, str]] = {"run": {}}
    current = "run"
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        sections[current][key] = value
    return sections


def parse_overrides(items: Sequence[str]) -> Dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if key.startswith("run."):
            key = key[4:]
        out[key] = value.strip()
    return out


def build_config(values: Optional[Dict[str, str]] = None, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    merged = dict(values or {})
    merged.update(overrides or {})
    kwargs = {k: coerce(k, v) for k, v in merged.items()}
    return RunConfig(**kwargs).validate()


# -- runs -------------------------------------------------------------------


def build_task(cfg: RunConfig):
    return make_task(
        cfg.task, cfg.seed, dim=cfg.dim or None, shape=cfg.param_shape(), clip_radius=cfg.clip_radius,
        noise=cfg.noise, drift=cfg.drift, drift_period=cfg.drift_period,
    )


def build_optimizer(cfg: RunConfig, shape, n_objectives: int):
    mode = cfg.mode
    if mode == "muon" and len(shape) != 2:
        # Muon only orthogonalizes matrices; vectors (biases, logistic weights) fall back to AdamW
        logger.info("muon mode with parameter shape %s: using adamw", shape)
        mode = "adamw"
    if mode == "muon":
        params = MuonParams(lr=cfg.peak_lr, momentum=cfg.momentum, ns_iterations=cfg.ns_iterations)
    else:
        delta, _ = cfg.betas()
        params = AdamWParams(cfg.peak_lr, delta[0], delta[1], cfg.eps, cfg.weight_decay)
    m = cfg.method
    if m == "joint":
        opt = Joint(shape, mode, params, _objective_weights(cfg, n_objectives))
    elif m == "alternate":
        opt = Alternate(shape, n_objectives, mode, params)
    elif m == "dualoptim":
        opt = DualOptim(shape, n_objectives, mode, params)
    elif m == "dualoptim_plus":
        delta, base = cfg.betas()
        if mode == "muon":
            base_betas = delta_betas = None
        else:
            base_betas, delta_betas = base, delta
        opt = DualOptimPlus(
            shape, n_objectives, mode, params, base_betas=base_betas, delta_betas=delta_betas,
            base_update_timing=cfg.base_update_timing, base_update_input=cfg.base_update_input,
        )
    else:
        period = sum(cfg.period_frequencies())
        opt = FLAdapted(shape, m, period, n_objectives, params)
    if cfg.quantize_states != "none":
        opt = QuantizedOptimizer(opt, cfg.quantize_states, cfg.block_size)
    return opt


def _objective_weights(cfg: RunConfig, n_objectives: int) -> tuple:
    # forget_weight scales objective 0 of two-objective (forget/retain) tasks
    if n_objectives == 2:
        return (cfg.forget_weight, 1.0)
    return (1.0,) * n_objectives


@dataclass
class RunReport:
    config: RunConfig
    objective_names: tuple
    objectives: List[int] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    losses: List[np.ndarray] = field(default_factory=list)
    theta_digest: str = ""
    traces: Dict[str, SimilarityTrace] = field(default_factory=dict)
    wall_time: float = 0.0
    diverged: bool = False
    error: str = ""
    final_theta: Optional[np.ndarray] = None

    @property
    def rows(self) -> int:
        return len(self.objectives)

    def final_loss(self, name: str) -> float:
        if not self.losses or name not in self.objective_names:
            return float("nan")
        return float(self.losses[-1][self.objective_names.index(name)])

    def steps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "objective", "lr"] + [f"loss_{n}" for n in self.objective_names])
        for i, (o, lr, ls) in enumerate(zip(self.objectives, self.lrs, self.losses), start=1):
            obj = self.objective_names[o] if o >= 0 else "joint"
            w.writerow([i, obj, f"{lr:.17g}"] + [f"{x:.17g}" for x in ls])
        return buf.getvalue()

    def similarity_csv(self) -> str:
        return traces_csv(list(self.traces.values()))

    def mean_similarity(self, label: str) -> float:
        tr = self.traces.get(label)
        if tr is None or not len(tr):
            return float("nan")
        return tr.mean_after(DEFAULT_BURN_IN)

    def content_hash(self) -> str:
        """Hash of everything except wall time."""
        h = hashlib.sha256()
        h.update(self.config.echo().encode())
        h.update(self.steps_csv().encode())
        h.update(self.similarity_csv().encode())
        h.update(self.theta_digest.encode())
        h.update(f"{self.diverged}|{self.error}".encode())
        return h.hexdigest()

    def summary_row(self) -> dict:
        c = self.config
        delta, base = c.betas()
        return {
            "method": c.method,
            "mode": c.mode,
            "task": c.task,
            "seed": c.seed,
            "forget_freq": c.forget_freq,
            "retain_freq": c.retain_freq,
            "beta1": delta[0],
            "beta2": delta[1],
            "base_beta1": base[0],
            "base_beta2": base[1],
            "base_update_timing": c.base_update_timing,
            "base_update_input": c.base_update_input,
            "quantize": c.quantize_states,
            "final_L_f": self.final_loss("forget"),
            "final_L_r": self.final_loss("retain"),
            "mean_update_similarity": self.mean_similarity("update"),
            "mean_gradient_similarity": self.mean_similarity("gradient_ema"),
            "diverged": int(self.diverged),
            "steps": self.rows,
            "content_hash": self.content_hash(),
        }


SUMMARY_COLUMNS = tuple(RunReport(RunConfig(), ("forget", "retain")).summary_row().keys())


def run_experiment(cfg: RunConfig) -> RunReport:
    """Run one configuration to completion (or divergence). Deterministic in ``cfg``."""
    cfg.validate()
    task = build_task(cfg)
    n_obj = task.n_objectives
    freqs = cfg.period_frequencies()
    if len(freqs) != n_obj:
        raise ConfigError("frequencies", f"task {cfg.task!r} has {n_obj} objectives, got {len(freqs)} frequencies")
    schedule = make_schedule(freqs, cfg.total_steps)
    lr_schedule = LrSchedule(cfg.peak_lr, cfg.total_steps, cfg.warmup())
    opt = build_optimizer(cfg, task.shape, n_obj)
    scale = _objective_weights(cfg, n_obj)
    report = RunReport(cfg, task.objective_names)
    theta = task.theta0.copy()
    records = []
    g_hist = [[] for _ in range(n_obj)] if cfg.diagnostics and n_obj >= 2 else None
    start = time.perf_counter()
    for t in range(1, cfg.total_steps + 1):
        lr = lr_schedule.lr_at(t)
        try:
            if g_hist is not None:
                for i in range(n_obj):
                    g_hist[i].append(task.grad(i, theta, t))
            if cfg.method == "joint":
                grads = [task.grad(i, theta, t) for i in range(n_obj)]
                theta = opt.step(theta, grads, 0, lr)
                obj = -1
            else:
                obj = schedule.objective_at(t)
                g = scale[obj] * task.grad(obj, theta, t)
                theta = opt.step(theta, g, obj, lr)
            with np.errstate(over="ignore", invalid="ignore"):
                losses = task.losses(theta)
        except (NonFiniteError, FloatingPointError, OverflowError) as exc:
            report.diverged = True
            report.error = f"step {t}: {exc}"
            logger.warning("run diverged at step %d: %s", t, exc)
            break
        report.objectives.append(obj)
        report.lrs.append(lr)
        report.losses.append(losses)
        if not np.all(np.isfinite(losses)):
            report.diverged = True
            report.error = f"step {t}: non-finite loss"
            break
        if cfg.diagnostics and obj >= 0:
            records.append(StepRecord(t, obj, np.array(opt.last_direction, copy=True), opt.last_update.copy()))
    report.wall_time = time.perf_counter() - start
    report.final_theta = theta
    report.theta_digest = digest(theta)
    if cfg.diagnostics:
        if records and len({r.objective for r in records}) >= 2:
            report.traces["update"] = update_similarity(records, "update", use="direction")
            report.traces["update_applied"] = update_similarity(records, "update_applied", use="update")
        if g_hist is not None and g_hist[0]:
            report.traces["gradient_ema"] = gradient_ema_similarity(g_hist[0], g_hist[1], 0.9, "gradient_ema")
    return report


# -- sweeps -----------------------------------------------------------------


def expand_grid(base: Dict[str, str], grid: Dict[str, Sequence]) -> List[Dict[str, str]]:
    if not grid:
        raise ValueError("sweep grid is empty")
    keys = list(grid)
    for k in keys:
        if not grid[k]:
            raise ConfigError(k, "grid axis has no values")
    points = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        values = dict(base)
        values.update({k: str(v) for k, v in zip(keys, combo)})
        points.append(values)
    return points


def parse_grid_section(section: Dict[str, str]) -> Dict[str, List[str]]:
    return {k: [v.strip() for v in raw.split(",") if v.strip()] for k, raw in section.items()}


ABLATIONS = {
    "base_timing": {"method": ["dualoptim_plus"], "base_update_timing": list(BASE_TIMINGS)},
    "base_input": {"method": ["dualoptim_plus"], "base_update_input": list(BASE_INPUTS)},
    "momentum_sets": {"method": ["dualoptim_plus"], "momentum_set": list(MOMENTUM_SETS)},
    "quantize": {"method": ["dualoptim_plus"], "quantize_states": list(SUBSETS)},
    "retain_freq": {
        "method": ["alternate", "dualoptim", "dualoptim_plus"],
        "forget_freq": ["1"],
        "retain_freq": ["1", "2", "4", "5", "9", "14"],
    },
    "methods": {"method": list(METHODS)},
}


@dataclass
class SweepResult:
    reports: List[Optional[RunReport]]
    configs: List[Dict[str, str]]
    failures: List[str]

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=("run",) + SUMMARY_COLUMNS + ("error",), lineterminator="\n")
        w.writeheader()
        for i, (rep, values) in enumerate(zip(self.reports, self.configs)):
            if rep is None:
                row = {k: "" for k in SUMMARY_COLUMNS}
                row.update({k: values.get(k, "") for k in ("method", "forget_freq", "retain_freq")})
                row["diverged"] = ""
                row["error"] = self.failures[i]
            else:
                row = {k: _cell(v) for k, v in rep.summary_row().items()}
                row["error"] = rep.error
            row["run"] = i
            w.writerow(row)
        return buf.getvalue()

    @property
    def n_failed(self) -> int:
        return sum(1 for r, f in zip(self.reports, self.failures) if r is None or r.diverged or f)


def _cell(v):
    return f"{v:.17g}" if isinstance(v, float) else v


def _run_point(values):
    try:
        return run_experiment(build_config(values)), ""
    except Exception as exc:  # recorded per point; the sweep carries on
        return None, f"{type(exc).__name__}: {exc}"


def sweep(base: Dict[str, str], grid: Dict[str, Sequence], jobs: int = 1) -> SweepResult:
    """One run per grid point; individual failures are recorded and the sweep continues."""
    points = expand_grid(base, grid)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_point, points))
    else:
        results = [_run_point(p) for p in points]
    return SweepResult([r for r, _ in results], points, [e for _, e in results])
