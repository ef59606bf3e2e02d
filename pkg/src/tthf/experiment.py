"""Experiment orchestration: config ingestion, multi-seed runs, cost accounting,
and plot-ready CSV/JSON emission."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import control, data, losses, topology, trainer
from .consensus import OutagePolicy
from .costs import CostParams
from .schedules import GammaPlan, StepSchedule, TrainingSchedule
from .trainer import MetricsTrace, TrainTask

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Configuration problem, reported with the offending field path."""

    def __init__(self, path: str, message: str):
        self.field_path = path
        super().__init__(f"config field '{path}': {message}")


_DEFAULTS = {
    "dataset": {
        "kind": "synthetic",
        "m": 10,
        "n_labels": 10,
        "per_label": 40,
        "separation": 3.0,
        "seed": 7,
        "path": None,
        "has_header": False,
    },
    "partition": {"mode": "extreme", "seed": 13},
    "loss": {"kind": "linear_regression", "reg": 0.1},
    "topology": {
        "n_clusters": 25,
        "cluster_size": 5,
        "field_m": 50.0,
        "d_c": 1.0 / 8.0,
        "seed": 11,
        "max_attempts": 100,
        "channel": {
            "noise_psd_dbm_hz": -173.0,
            "bandwidth_hz": 1e6,
            "tx_power_dbm": 24.0,
            "pathloss_ref_db": -30.0,
            "pathloss_exp": 3.75,
            "ref_dist_m": 1.0,
            "rate_bps": 14e6,
            "outage_threshold": 0.05,
        },
    },
    "sgd": {"batch_size": "full"},
    "step": {"kind": "diminishing", "gamma": "auto", "alpha": "auto", "eta": 0.01},
    "schedule": {
        "mode": "fixed",
        "T": None,
        "tau": 20,
        "gamma": {"mode": "fixed", "value": 0, "cadence": 5, "phi": 1.0, "max_rounds": 100},
    },
    "aggregation": {"mode": "sampled"},
    "control": {
        "xi": "auto",
        "xi_boost": 4.0,
        "tau_max": 40,
        "tau1": 10,
        "zeta_frac": 0.1,
        "gamma_over_mu": 2.0,
        "sigma_batch": 16,
        "use_pl_surrogate": True,
        "alpha_cap": 1e9,
        "alpha_margin": 2.0,
    },
    "cost": {
        "e_d2d": 0.04,
        "e_glob": 1.0,
        "delta_d2d": 0.04,
        "delta_glob": 1.0,
        "c1": 1e-3,
        "c2": 1e2,
        "c3": 1e4,
    },
    "outage": {"enabled": False},
    "init": {"kind": "zeros", "scale": 1.0, "seed": 0},
    "replace_between_intervals": False,
    "eval_accuracy": True,
    "seeds": None,
    "output_dir": None,
}

_REQUIRED = (("schedule", "T"), ("seeds",), ("output_dir",))


def _merge(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigError(path or "<root>", f"expected a mapping, got {type(user).__name__}")
    out = {}
    for key, default in defaults.items():
        sub_path = f"{path}.{key}" if path else key
        if key in user:
            out[key] = _merge(default, user[key], sub_path) if isinstance(default, dict) else user[key]
        else:
            out[key] = json.loads(json.dumps(default)) if isinstance(default, dict) else default
    unknown = set(user) - set(defaults)
    if unknown:
        bad = sorted(unknown)[0]
        raise ConfigError(f"{path}.{bad}" if path else bad, "unknown field")
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    path: Optional[str] = None

    def __getitem__(self, key):
        return self.raw[key]

    def hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def load_config(source) -> ExperimentConfig:
    """Parse and validate a JSON config, filling documented defaults."""
    if isinstance(source, (str, Path)):
        try:
            raw = json.loads(Path(source).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError("<file>", f"config file not found: {source}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        path = str(source)
    else:
        raw = source
        path = None
    merged = _merge(_DEFAULTS, raw)
    for keys in _REQUIRED:
        node = merged
        for key in keys:
            node = node.get(key) if isinstance(node, dict) else None
        if node is None:
            raise ConfigError(".".join(keys), "missing required field")
    _validate(merged)
    return ExperimentConfig(raw=merged, path=path)


def _validate(cfg):
    if cfg["dataset"]["kind"] not in ("synthetic", "csv"):
        raise ConfigError("dataset.kind", "must be 'synthetic' or 'csv'")
    if cfg["dataset"]["kind"] == "csv" and not cfg["dataset"]["path"]:
        raise ConfigError("dataset.path", "missing required field")
    if cfg["partition"]["mode"] not in data.PARTITION_MODES:
        raise ConfigError("partition.mode", f"must be one of {data.PARTITION_MODES}")
    if cfg["loss"]["kind"] not in (losses.LINEAR_REGRESSION, losses.SQUARED_HINGE_SVM):
        raise ConfigError("loss.kind", "unknown loss kind")
    if cfg["schedule"]["mode"] not in ("fixed", "adaptive"):
        raise ConfigError("schedule.mode", "must be 'fixed' or 'adaptive'")
    if not isinstance(cfg["schedule"]["T"], int) or cfg["schedule"]["T"] < 1:
        raise ConfigError("schedule.T", "must be a positive integer")
    if cfg["aggregation"]["mode"] not in (trainer.SAMPLED, trainer.FULL):
        raise ConfigError("aggregation.mode", "must be 'sampled' or 'full'")
    batch = cfg["sgd"]["batch_size"]
    if batch != "full" and (not isinstance(batch, int) or batch < 1):
        raise ConfigError("sgd.batch_size", "must be 'full' or a positive integer")
    if not isinstance(cfg["seeds"], list) or not cfg["seeds"]:
        raise ConfigError("seeds", "must be a non-empty list of integers")
    gm = cfg["schedule"]["gamma"]["mode"]
    if gm not in ("none", "fixed", "certified"):
        raise ConfigError("schedule.gamma.mode", "must be 'none', 'fixed', or 'certified'")


def build_task(config: ExperimentConfig) -> TrainTask:
    """Materialize dataset, partitions, network, and solved task constants."""
    cfg = config.raw
    ds_cfg = cfg["dataset"]
    if ds_cfg["kind"] == "synthetic":
        dataset = data.gen_synthetic(
            ds_cfg["m"], ds_cfg["n_labels"], ds_cfg["per_label"], ds_cfg["separation"], ds_cfg["seed"]
        )
    else:
        dataset = data.load_csv(ds_cfg["path"], has_header=ds_cfg["has_header"])
    topo = cfg["topology"]
    channel = topology.ChannelParams(**topo["channel"])
    clusters = topology.build_network(
        topo["n_clusters"], topo["cluster_size"], topo["field_m"], channel,
        d_c=topo["d_c"], seed=topo["seed"], max_attempts=topo["max_attempts"],
    )
    n_devices = sum(c.size for c in clusters)
    plan = data.PartitionPlan(mode=cfg["partition"]["mode"], seed=cfg["partition"]["seed"])
    model = losses.LossModel(kind=cfg["loss"]["kind"], reg=cfg["loss"]["reg"], dim=dataset.dim)
    flat_parts = data.partition(dataset, n_devices, plan, kind=model.kind)
    parts, pos = [], 0
    for spec in clusters:
        parts.append(flat_parts[pos : pos + spec.size])
        pos += spec.size
    batch = cfg["sgd"]["batch_size"]
    task = trainer.make_task(
        model,
        clusters,
        parts,
        batch_size=None if batch == "full" else batch,
        eval_accuracy=cfg["eval_accuracy"],
        n_labels=dataset.n_labels,
    )
    init = cfg["init"]
    if init["kind"] == "offset":
        rng = np.random.default_rng(np.random.SeedSequence([int(init["seed"]), 0x1217]))
        direction = rng.standard_normal(model.dim)
        task.w0 = init["scale"] * direction / np.linalg.norm(direction)
    elif init["kind"] != "zeros":
        raise ConfigError("init.kind", "must be 'zeros' or 'offset'")
    return task


def resolve_step_schedule(config: ExperimentConfig, task: TrainTask) -> StepSchedule:
    """Fill 'auto' step parameters from the task's curvature constants."""
    step = config.raw["step"]
    if step["kind"] == "constant":
        return StepSchedule(kind="constant", eta_const=step["eta"])
    ctrl = config.raw["control"]
    gamma = step["gamma"]
    if gamma == "auto":
        gamma = ctrl["gamma_over_mu"] / task.mu
    alpha = step["alpha"]
    if alpha == "auto":
        alpha = control.select_alpha(
            task.mu, task.beta, gamma, ctrl["zeta_frac"], ctrl["tau_max"], cap=ctrl["alpha_cap"]
        )
    return StepSchedule(kind="diminishing", gamma=float(gamma), alpha=float(alpha))


def _topology_refresh(config: ExperimentConfig, task: TrainTask):
    """Per-interval device re-placement, when the config asks for it."""
    if not config.raw["replace_between_intervals"]:
        return None
    topo = config.raw["topology"]
    channel = topology.ChannelParams(**topo["channel"])

    def refresh(k: int):
        return topology.build_network(
            topo["n_clusters"], topo["cluster_size"], topo["field_m"], channel,
            d_c=topo["d_c"], seed=topo["seed"] + 7919 * k, max_attempts=topo["max_attempts"],
        )

    return refresh


def run_single(config: ExperimentConfig, task: TrainTask, seed: int) -> MetricsTrace:
    """One deterministic protocol run for the given seed."""
    cfg = config.raw
    cost = CostParams(**cfg["cost"])
    outage = OutagePolicy(enabled=bool(cfg["outage"]["enabled"]))
    refresh = _topology_refresh(config, task)
    sched_cfg = cfg["schedule"]
    if sched_cfg["mode"] == "adaptive":
        ctrl = cfg["control"]
        adaptive = control.AdaptiveConfig(
            xi=None if ctrl["xi"] == "auto" else float(ctrl["xi"]),
            xi_boost=ctrl["xi_boost"],
            T=sched_cfg["T"],
            tau_max=ctrl["tau_max"],
            tau1=ctrl["tau1"],
            zeta_frac=ctrl["zeta_frac"],
            gamma_over_mu=ctrl["gamma_over_mu"],
            batch_size=task.batch_size,
            sigma_batch=ctrl["sigma_batch"],
            gamma_max=sched_cfg["gamma"]["max_rounds"],
            alpha_cap=ctrl["alpha_cap"],
            alpha_margin=ctrl["alpha_margin"],
            use_pl_surrogate=ctrl["use_pl_surrogate"],
        )
        trace, _ = control.run_adaptive(
            task, adaptive, cost=cost, outage=outage, seed=seed, topology_refresh=refresh
        )
    else:
        steps = resolve_step_schedule(config, task)
        schedule = _training_schedule(sched_cfg)
        g = sched_cfg["gamma"]
        plan = GammaPlan(
            mode=g["mode"], value=g["value"], cadence=g["cadence"], phi=g["phi"],
            max_rounds=g["max_rounds"],
        )
        if cfg["aggregation"]["mode"] == trainer.FULL:
            trace = trainer.run_baseline(
                task, steps, sched_cfg["T"], _first_tau(sched_cfg), outage=outage, cost=cost,
                seed=seed, topology_refresh=refresh,
            )
        else:
            trace = trainer.run_tthf(
                task, steps, schedule, plan, outage=outage, cost=cost, seed=seed,
                topology_refresh=refresh,
            )
    from . import __version__

    trace.meta.update({
        "config_hash": config.hash(),
        "seed": seed,
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
    })
    return trace


def _training_schedule(sched_cfg) -> TrainingSchedule:
    tau = sched_cfg["tau"]
    if isinstance(tau, list):
        return TrainingSchedule(T=sched_cfg["T"], taus=tau)
    return TrainingSchedule.uniform(sched_cfg["T"], int(tau))


def _first_tau(sched_cfg) -> int:
    tau = sched_cfg["tau"]
    return int(tau[0]) if isinstance(tau, list) else int(tau)


@dataclass
class CostSummary:
    total_energy: float
    total_delay: float
    interval_terms: list
    objective_total: float


def accumulate_cost(trace: MetricsTrace, cost: CostParams, alpha: Optional[float] = None) -> CostSummary:
    """Exact energy/delay sums plus the per-interval objective decomposition."""
    total_energy = float(trace.energy.sum())
    total_delay = float(trace.delay.sum())
    terms = []
    objective = 0.0
    t_km1 = 0
    for t_k, tau_k in zip(trace.boundaries, trace.taus):
        sl = slice(t_km1, t_k)
        e_k = float(trace.energy[sl].sum())
        d_k = float(trace.delay[sl].sum())
        term_a = cost.c1 * e_k / tau_k
        term_b = cost.c2 * d_k / tau_k
        term_c = 0.0
        if alpha is not None:
            term_c = cost.c3 * (1.0 - (t_km1 + alpha) / (t_km1 + tau_k + alpha))
        terms.append({"k": len(terms) + 1, "a": term_a, "b": term_b, "c": term_c})
        objective += term_a + term_b + term_c
        t_km1 = t_k
    return CostSummary(total_energy, total_delay, terms, objective)


def objective_cost_until(trace: MetricsTrace, cost: CostParams, t_stop: int, alpha: float) -> float:
    """Objective accumulated over the intervals needed to reach timestep t_stop."""
    objective = 0.0
    t_km1 = 0
    for t_k, tau_k in zip(trace.boundaries, trace.taus):
        sl = slice(t_km1, t_k)
        objective += cost.c1 * float(trace.energy[sl].sum()) / tau_k
        objective += cost.c2 * float(trace.delay[sl].sum()) / tau_k
        objective += cost.c3 * (1.0 - (t_km1 + alpha) / (t_km1 + tau_k + alpha))
        if t_k >= t_stop:
            break
        t_km1 = t_k
    return objective


def time_to_fraction_of_peak(accuracy: np.ndarray, target: float) -> Optional[int]:
    """First trace index (0-based) reaching the accuracy target, or None."""
    hits = np.flatnonzero(np.asarray(accuracy) >= target)
    return int(hits[0]) if hits.size else None


def compare_runs(trace_a: MetricsTrace, trace_b: MetricsTrace) -> dict:
    """Per-t loss-gap deltas, first crossover, and total cost ratios."""
    if len(trace_a) != len(trace_b):
        raise ValueError(f"trace lengths differ: {len(trace_a)} vs {len(trace_b)}")
    delta = trace_a.loss_gap_sampled - trace_b.loss_gap_sampled
    below = np.flatnonzero(delta < 0)
    energy_a, energy_b = float(trace_a.energy.sum()), float(trace_b.energy.sum())
    delay_a, delay_b = float(trace_a.delay.sum()), float(trace_b.delay.sum())
    return {
        "per_t_delta": delta,
        "final_delta": float(delta[-1]),
        "first_crossover_t": int(trace_a.t[below[0]]) if below.size else None,
        "energy_ratio": energy_a / energy_b if energy_b else float("inf"),
        "delay_ratio": delay_a / delay_b if delay_b else float("inf"),
    }


def _bound_check(config, task, traces, mean_gap):
    """Sublinear-envelope pass/fail when a certificate applies, else None.

    Only meaningful for quadratic tasks (exact diversity constants exist), a
    diminishing step schedule, and full-batch gradients (sigma = 0 is then an
    exact noise bound).
    """
    cfg = config.raw
    from . import bounds

    if (
        task.model.kind != losses.LINEAR_REGRESSION
        or cfg["step"]["kind"] != "diminishing"
        or task.batch_size is not None
        or cfg["schedule"]["mode"] != "fixed"
        or cfg["schedule"]["gamma"]["mode"] != "certified"
    ):
        return None
    steps = resolve_step_schedule(config, task)
    delta, zeta = bounds.exact_diversity_quadratic(task.model, task.parts)
    omega = zeta / (2.0 * task.beta)
    tau = cfg["schedule"]["tau"]
    tau_max = int(max(tau) if isinstance(tau, list) else tau)
    init_gap = task.global_loss(task.w0) - task.f_star
    try:
        constants = bounds.thm2_constants(
            steps.gamma, steps.alpha, task.mu, task.beta, tau_max, 0.0,
            cfg["schedule"]["gamma"]["phi"], delta, init_gap, omega,
        )
    except ValueError:
        return None
    ts = traces[0].t
    return bool(np.all(mean_gap <= constants.nu / (ts + steps.alpha)))


def run_experiment(config_source, output_dir: Optional[str] = None, workers: int = 1) -> dict:
    """Run every seed, write per-seed traces and the summary JSON; returns the summary."""
    config = load_config(config_source)
    cfg = config.raw
    out = Path(output_dir or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    task = build_task(config)
    seeds = [int(s) for s in cfg["seeds"]]

    def one(seed):
        return seed, run_single(config, task, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(one, seeds))
    else:
        results = dict(one(s) for s in seeds)

    traces = [results[s] for s in seeds]
    for seed, trace in zip(seeds, traces):
        trace.to_csv(out / f"trace_seed{seed}.csv")
        if trace.control_rows:
            trace.control_to_csv(out / f"trace_seed{seed}_control.csv")

    gap_matrix = np.stack([tr.loss_gap_sampled for tr in traces])
    mean_gap = gap_matrix.mean(axis=0)
    cost = CostParams(**cfg["cost"])
    summaries = [accumulate_cost(tr, cost) for tr in traces]
    summary = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config.hash(),
        "seeds": seeds,
        "T": cfg["schedule"]["T"],
        "mu": task.mu,
        "beta": task.beta,
        "f_star": task.f_star,
        "final_mean_gap": float(mean_gap[-1]),
        "min_mean_gap": float(mean_gap.min()),
        "total_energy_mean": float(np.mean([s.total_energy for s in summaries])),
        "total_delay_mean": float(np.mean([s.total_delay for s in summaries])),
        "bound_check": _bound_check(config, task, traces, mean_gap),
    }
    if traces[0].accuracy is not None:
        acc = np.stack([tr.accuracy for tr in traces]).mean(axis=0)
        peak = float(acc.max())
        idx = time_to_fraction_of_peak(acc, 0.75 * peak)
        summary["peak_accuracy"] = peak
        summary["t_to_75pct_peak"] = None if idx is None else int(traces[0].t[idx])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return summary
