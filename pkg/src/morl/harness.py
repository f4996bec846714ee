"""Seeded experiment sweeps, CSV emission and scaling-law fits.

Seeding is hierarchical.  ``family_seed`` fixes the environment family, the
behavior policies, the model class and the downstream target; every data
stream is keyed by ``(family_seed, experiment, seed, grid point)``, so adding
an experiment or a grid point never perturbs the others.
"""

from __future__ import annotations

import csv
import io
import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from .envgen import (
    TaskFamily,
    certify,
    gen_behavior_policies,
    gen_behavior_policy,
    gen_dataset,
    gen_model_class,
    gen_target_task,
    gen_task_family,
    measure_c_r,
    merge_certificates,
    random_linear_reward,
)
from .linear import ReachabilityError
from .linear import xi_down as xi_down_value
from .mdp import evaluate_policy, initial_value, optimal_plan
from .model_class import fit_all_steps
from .offline_online import LSVIConfig, PEVIConfig, lsvi_ucb, pevi, pevi_beta
from .rfe import RFEConfig, rfe_explore, rfe_plan
from .upstream import default_lambda, run_morl, upstream_report

EXPERIMENTS = ("upstream", "rfe", "offline", "online")

# column order of each experiment's CSV; theory columns are recomputable from
# the size/constant columns that precede them
SCHEMA = {
    "upstream": ["experiment", "seed", "n", "T", "h", "nT", "S", "K", "H", "d", "size_phi", "size_psi",
                 "delta", "lam", "omega", "alpha", "zeta_n", "avg_tv", "tv_bound", "subopt", "subopt_bound",
                 "c_star", "pessimism_gap", "pessimism_bound", "error"],
    "rfe": ["experiment", "seed", "K_RFE", "H", "d", "delta", "n_upstream", "beta", "xi_down_theory",
            "subopt_median", "subopt_mean", "subopt_max", "error"],
    "offline": ["experiment", "seed", "N_off", "H", "d", "delta", "c_beta", "beta", "xi_down_theory",
                "subopt", "error"],
    "online": ["experiment", "seed", "N_on", "H", "d", "delta", "c_beta", "xi_down_theory", "avg_regret",
               "mixture_value", "optimal_value", "error"],
}
GRID_KEY = {"upstream": "n", "rfe": "K_RFE", "offline": "N_off", "online": "N_on"}
METRIC = {"upstream": "avg_tv", "rfe": "subopt_median", "offline": "subopt", "online": "avg_regret"}


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode())


@dataclass(frozen=True)
class ExperimentConfig:
    S: int = 5
    K: int = 2
    H: int = 3
    d: int = 2
    T_grid: tuple = (4,)
    min_action_prob: float = 0.25
    num_phi_decoys: int = 7
    num_psi_decoys: int = 8
    perturb_scale: float = 0.2
    scale_decay: float = 0.5
    n_grid: tuple = (1000,)
    K_grid: tuple = (4000,)
    N_off_grid: tuple = (2000,)
    N_on_grid: tuple = (1000,)
    n_upstream: int = 10000
    num_rewards: int = 10
    target_weight: float = 0.0
    lam: float | None = None  # None: the log class term
    alpha: float | str = "theory"
    lambda_d: float = 1.0
    c_beta: float = 1.0
    c_beta_online: float = 1.0
    xi_down: float = 0.0  # misspecification level handed to the downstream learners
    kappa_min: float = 0.0  # downstream runs need the behavior reachability to clear this
    delta: float = 0.1
    seeds: tuple = (0,)
    family_seed: int = 0
    experiments: tuple = ("upstream",)
    output_dir: str = "results"
    tag: str = "run"
    workers: int = 1

    def __post_init__(self):
        for name in ("T_grid", "n_grid", "K_grid", "N_off_grid", "N_on_grid", "seeds", "experiments"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("T_grid", "n_grid", "K_grid", "N_off_grid", "N_on_grid", "seeds"):
            vals = getattr(self, name)
            if not vals:
                raise ValueError(f"{name} must be nonempty")
            if any(int(v) != v or v < (0 if name == "seeds" else 1) for v in vals):
                raise ValueError(f"{name} must hold positive integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        unknown = set(self.experiments) - set(EXPERIMENTS)
        if unknown or not self.experiments:
            raise ValueError(f"unknown experiments {sorted(unknown)}")
        if not (self.alpha == "theory" or isinstance(self.alpha, (int, float))):
            raise ValueError("alpha must be 'theory' or a number")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def T_max(self) -> int:
        return max(self.T_grid)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        data = self.to_dict()
        data.update(changes)
        return ExperimentConfig.from_dict(data)


@dataclass
class SweepResult:
    config: ExperimentConfig
    rows: dict  # experiment -> list of row dicts in deterministic key order
    slopes: dict = field(default_factory=dict)  # experiment -> (slope, stderr)
    paths: dict = field(default_factory=dict)

    def medians(self, experiment: str, metric: str | None = None, **filters) -> dict:
        """Median over seeds of ``metric`` (averaged over h for upstream) per grid value."""
        return grid_medians(self.rows[experiment], experiment, metric, **filters)

    def errors(self) -> list[dict]:
        return [r for rows in self.rows.values() for r in rows if r.get("error")]


def grid_medians(rows, experiment: str, metric: str | None = None, **filters) -> dict:
    metric = metric or METRIC[experiment]
    key = GRID_KEY[experiment]
    per = {}
    for r in rows:
        if r.get("error") or any(r[k] != v for k, v in filters.items()):
            continue
        per.setdefault(r[key], {}).setdefault(r["seed"], []).append(float(r[metric]))
    return {g: float(np.median([np.mean(v) for v in by_seed.values()])) for g, by_seed in sorted(per.items())}


def fit_loglog_slope(x, y) -> tuple[float, float]:
    """Ordinary least squares of ``log y`` on ``log x``; returns ``(slope, stderr)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be equal-length vectors")
    if len(x) < 3:
        raise ValueError("need at least 3 points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive values")
    lx, ly = np.log(x), np.log(y)
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    dof = len(x) - 2
    sxx = float(np.sum((lx - lx.mean()) ** 2))
    if sxx == 0:
        raise ValueError("x values must not all be equal")
    stderr = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else 0.0
    return float(coef[0]), stderr


# --------------------------------------------------------------------------
# environment context shared by all jobs of one config


@dataclass
class Context:
    family: TaskFamily  # T_max tasks
    behavior: list
    classes: dict  # T -> ModelClass
    target: object
    target_spec: object
    target_behavior: object
    rewards: list  # revealed rewards for reward-free planning
    c_r: float
    kappa: float


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


@lru_cache(maxsize=8)
def _context(config_json: str) -> Context:
    cfg = ExperimentConfig.from_dict(json.loads(config_json))
    fs = cfg.family_seed
    family = gen_task_family(cfg.S, cfg.K, cfg.H, cfg.d, cfg.T_max, _rng(fs, stream_key("family")))
    behavior, cert = gen_behavior_policies(family, cfg.min_action_prob, _rng(fs, stream_key("behavior")))
    classes = {}
    for T in cfg.T_grid:
        classes[T] = gen_model_class(family.subset(T), cfg.num_phi_decoys, cfg.num_psi_decoys, cfg.perturb_scale,
                                     _rng(fs, stream_key("class")), scale_decay=cfg.scale_decay)
    g_tgt = _rng(fs, stream_key("target"))
    coeffs = g_tgt.dirichlet(np.ones(family.T))
    target, spec = gen_target_task(family, coeffs, cfg.target_weight, g_tgt)
    target_behavior, _ = gen_behavior_policy(target, cfg.min_action_prob, g_tgt)
    rewards = [random_linear_reward(family.shared_phi, g_tgt) for _ in range(cfg.num_rewards)]
    c_r = measure_c_r(classes[cfg.T_max], _rng(fs, stream_key("c_r")))
    return Context(family, behavior, classes, target, spec, target_behavior, rewards, c_r, cert.kappa)


def build_context(config: ExperimentConfig) -> Context:
    return _context(json.dumps(config.to_dict(), sort_keys=True))


@lru_cache(maxsize=64)
def _downstream_features(config_json: str, seed: int) -> np.ndarray:
    cfg = ExperimentConfig.from_dict(json.loads(config_json))
    ctx = _context(config_json)
    ds = gen_dataset(ctx.family, ctx.behavior, cfg.n_upstream,
                     _rng(cfg.family_seed, stream_key("downstream_upstream"), seed))
    return fit_all_steps(ctx.classes[cfg.T_max], ds).phi_hat


def downstream_features(config: ExperimentConfig, seed: int) -> np.ndarray:
    """Upstream feature estimate handed to the downstream learners for one seed."""
    kappa = build_context(config).kappa
    if kappa <= config.kappa_min:
        raise ReachabilityError(f"behavior reachability kappa={kappa:.3g} does not exceed kappa_min")
    return _downstream_features(json.dumps(config.to_dict(), sort_keys=True), seed)


def _rfe_data(cfg: ExperimentConfig, ctx: Context, phi_hat: np.ndarray, seed: int, K_RFE: int):
    rc = RFEConfig.from_theory(K_RFE, cfg.d, cfg.H, cfg.delta, xi_down=cfg.xi_down, lambda_d=cfg.lambda_d)
    data, _ = rfe_explore(ctx.target, phi_hat, rc, _rng(cfg.family_seed, stream_key("rfe"), seed, K_RFE))
    return rc, data


def plan_revealed_reward(config: ExperimentConfig, reward: np.ndarray, seed: int | None = None,
                         K_RFE: int | None = None):
    """Explore the target once, then plan for ``reward``; returns ``(policy, value, optimal value)``."""
    seed = config.seeds[0] if seed is None else seed
    K_RFE = config.K_grid[0] if K_RFE is None else K_RFE
    ctx = build_context(config)
    reward = np.asarray(reward, dtype=float)
    if reward.shape != ctx.target.reward.shape:
        raise ValueError(f"reward shape {reward.shape} does not match {ctx.target.reward.shape}")
    phi_hat = downstream_features(config, seed)
    rc, data = _rfe_data(config, ctx, phi_hat, seed, K_RFE)
    policy, _ = rfe_plan(data, phi_hat, reward, rc.beta, config.lambda_d)
    return policy, _value(ctx.target, reward, policy), _optimal_value(ctx.target, reward)


def _xi_down_theory(cfg: ExperimentConfig, ctx: Context) -> float:
    cls = ctx.classes[cfg.T_max]
    return xi_down_value(ctx.target_spec.xi, ctx.target_spec.C_L, ctx.c_r, 1.0 / cfg.S, ctx.kappa, cfg.T_max,
                         cfg.n_upstream, cls.size_phi, cls.size_psi, cfg.H, cfg.delta).value


def _value(mdp, reward, policy) -> float:
    return initial_value(evaluate_policy(mdp, reward, policy), mdp)


def _optimal_value(mdp, reward) -> float:
    return initial_value(optimal_plan(mdp, reward)[1], mdp)


# --------------------------------------------------------------------------
# one job per (experiment, seed, grid point)


def _job_upstream(cfg: ExperimentConfig, ctx: Context, seed: int, n: int, T: int) -> list[dict]:
    family = ctx.family.subset(T)
    behavior = ctx.behavior[:T]
    cls = ctx.classes[T]
    cert = merge_certificates(certify(task, pol) for task, pol in zip(family.tasks, behavior))
    ds = gen_dataset(family, behavior, n, _rng(cfg.family_seed, stream_key("upstream"), seed, n))
    lam = cfg.lam if cfg.lam is not None else default_lambda(cls.size_phi, cls.size_psi, T, n, cfg.H, cfg.delta)
    result = run_morl(ds, cls, family.rewards, lam, cfg.alpha, omega=cert.omega, delta=cfg.delta)
    report = upstream_report(result, family, behavior, family.rewards, cls, n, cert.omega, cfg.delta)
    base = {"experiment": "upstream", "seed": seed, "n": n, "T": T, "nT": n * T, "S": cfg.S, "K": cfg.K,
            "H": cfg.H, "d": cfg.d, "size_phi": cls.size_phi, "size_psi": cls.size_psi, "delta": cfg.delta,
            "lam": lam, "error": ""}
    return [{**base, **row} for row in report.rows()]


def _job_rfe(cfg: ExperimentConfig, ctx: Context, seed: int, K_RFE: int) -> list[dict]:
    phi_hat = downstream_features(cfg, seed)
    rc, data = _rfe_data(cfg, ctx, phi_hat, seed, K_RFE)
    gaps = []
    for r in ctx.rewards:
        policy, _ = rfe_plan(data, phi_hat, r, rc.beta, cfg.lambda_d)
        gaps.append(_optimal_value(ctx.target, r) - _value(ctx.target, r, policy))
    return [{"experiment": "rfe", "seed": seed, "K_RFE": K_RFE, "H": cfg.H, "d": cfg.d, "delta": cfg.delta,
             "n_upstream": cfg.n_upstream, "beta": rc.beta, "xi_down_theory": _xi_down_theory(cfg, ctx),
             "subopt_median": float(np.median(gaps)), "subopt_mean": float(np.mean(gaps)),
             "subopt_max": float(np.max(gaps)), "error": ""}]


def _job_offline(cfg: ExperimentConfig, ctx: Context, seed: int, N_off: int) -> list[dict]:
    phi_hat = downstream_features(cfg, seed)
    tgt = ctx.target
    ds = gen_dataset(TaskFamily((tgt,)), [ctx.target_behavior], N_off,
                     _rng(cfg.family_seed, stream_key("offline"), seed, N_off))
    beta = pevi_beta(cfg.H, cfg.d, N_off, cfg.xi_down, cfg.delta, cfg.c_beta)
    policy, _ = pevi(ds, phi_hat, PEVIConfig(beta, cfg.lambda_d, cfg.xi_down, cfg.delta))
    gap = _optimal_value(tgt, tgt.reward) - _value(tgt, tgt.reward, policy)
    return [{"experiment": "offline", "seed": seed, "N_off": N_off, "H": cfg.H, "d": cfg.d, "delta": cfg.delta,
             "c_beta": cfg.c_beta, "beta": beta, "xi_down_theory": _xi_down_theory(cfg, ctx),
             "subopt": gap, "error": ""}]


def _job_online(cfg: ExperimentConfig, ctx: Context, seed: int, N_on: int) -> list[dict]:
    phi_hat = downstream_features(cfg, seed)
    tgt = ctx.target
    lc = LSVIConfig(N_on, cfg.lambda_d, cfg.c_beta_online, cfg.xi_down, ctx.target_spec.C_L, cfg.delta)
    res = lsvi_ucb(tgt, phi_hat, tgt.reward, lc, _rng(cfg.family_seed, stream_key("online"), seed, N_on))
    return [{"experiment": "online", "seed": seed, "N_on": N_on, "H": cfg.H, "d": cfg.d, "delta": cfg.delta,
             "c_beta": cfg.c_beta_online, "xi_down_theory": _xi_down_theory(cfg, ctx),
             "avg_regret": res.average_regret, "mixture_value": res.mixture_value,
             "optimal_value": res.optimal_value, "error": ""}]


def _jobs(cfg: ExperimentConfig) -> list[tuple]:
    jobs = []
    for exp in cfg.experiments:
        if exp == "upstream":
            jobs += [(exp, seed, n, T) for T in cfg.T_grid for n in cfg.n_grid for seed in cfg.seeds]
        else:
            grid = {"rfe": cfg.K_grid, "offline": cfg.N_off_grid, "online": cfg.N_on_grid}[exp]
            jobs += [(exp, seed, g) for g in grid for seed in cfg.seeds]
    return jobs


def _error_rows(cfg: ExperimentConfig, job: tuple, exc: Exception) -> list[dict]:
    exp, seed, g = job[:3]
    row = {c: "" for c in SCHEMA[exp]}
    row.update({"experiment": exp, "seed": seed, GRID_KEY[exp]: g, "error": f"{type(exc).__name__}: {exc}"})
    if exp == "upstream":
        row["T"] = job[3]
        return [{**row, "h": h} for h in range(cfg.H)]
    return [row]


def run_job(config_json: str, job: tuple) -> list[dict]:
    cfg = ExperimentConfig.from_dict(json.loads(config_json))
    runner = {"upstream": _job_upstream, "rfe": _job_rfe, "offline": _job_offline, "online": _job_online}[job[0]]
    try:
        return runner(cfg, _context(config_json), *job[1:])
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        return _error_rows(cfg, job, exc)


def _sort_key(row: dict) -> tuple:
    exp = row["experiment"]
    return (row.get("T", 0) or 0, row[GRID_KEY[exp]], row["seed"], row.get("h", 0) or 0)


def write_csv(rows, experiment: str, path) -> None:
    Path(path).write_text(csv_text(rows, experiment))


def csv_text(rows, experiment: str) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SCHEMA[experiment], lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def run_sweep(config: ExperimentConfig, write: bool = True) -> SweepResult:
    """Run every requested (experiment, seed, grid point) job and optionally emit CSVs."""
    out_dir = Path(config.output_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        try:
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise PermissionError(f"output directory {out_dir} is not writable") from exc
    config_json = json.dumps(config.to_dict(), sort_keys=True)
    jobs = _jobs(config)
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            results = list(pool.map(run_job, [config_json] * len(jobs), jobs))
    else:
        results = [run_job(config_json, job) for job in jobs]
    rows = {exp: [] for exp in config.experiments}
    for job, job_rows in zip(jobs, results):
        rows[job[0]].extend(job_rows)
    for exp in rows:
        rows[exp].sort(key=_sort_key)
    result = SweepResult(config, rows)
    for exp in config.experiments:
        if exp == "upstream":
            if len(config.T_grid) > 1:
                continue
            # the upstream rate is stated in the total sample count nT
            med = {g * config.T_grid[0]: v for g, v in result.medians(exp).items()}
        else:
            med = result.medians(exp)
        if len(med) >= 3 and all(v > 0 for v in med.values()):
            result.slopes[exp] = fit_loglog_slope(list(med), list(med.values()))
    if write:
        for exp, exp_rows in rows.items():
            path = out_dir / f"{exp}_{config.tag}.csv"
            write_csv(exp_rows, exp, path)
            result.paths[exp] = path
    return result
