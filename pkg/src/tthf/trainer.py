"""Protocol orchestration: local SGD, clustered consensus, sampled aggregation.

The engine runs the two-timescale loop with pluggable interval-length and
D2D-round providers, so fixed-parameter runs, baselines, and the adaptive
controller all share one deterministic code path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import losses
from .bounds import dispersion_sample
from .consensus import OutagePolicy, consensus_error, run_consensus
from .costs import CostParams
from .losses import LINEAR_REGRESSION, DevicePartition, LossModel
from .schedules import GammaPlan, StepSchedule, TrainingSchedule
from .topology import ClusterSpec, cluster_weights

SAMPLED = "sampled"
FULL = "full"

# entropy tags for the independent rng substreams of one run
_STREAM_SAMPLING = 0x5A11
_STREAM_SGD = 0x5D00
_STREAM_OUTAGE = 0x007A
_STREAM_ESTIMATE = 0xE57


def device_rngs(seed: int, n_devices: int) -> list[np.random.Generator]:
    """One deterministic substream per device, independent of iteration order."""
    return [
        np.random.default_rng(np.random.SeedSequence([seed, _STREAM_SGD, d]))
        for d in range(n_devices)
    ]


def local_sgd_step(
    model: LossModel,
    w: np.ndarray,
    part: DevicePartition,
    eta: float,
    rng: Optional[np.random.Generator] = None,
    batch_size: Optional[int] = None,
) -> np.ndarray:
    """One intermediate update w - eta * g with g from the device's gradient estimate."""
    if eta < 0:
        raise ValueError("step size must be non-negative")
    if batch_size is None:
        g = losses.grad_full(model, w, part)
    else:
        g = losses.grad_sgd(model, w, part, batch_size, rng)
    return w - eta * g


def global_aggregate(
    models: Sequence[np.ndarray], varrho: np.ndarray, sampled: Sequence[int]
) -> np.ndarray:
    """Server model from one sampled device per cluster, size-weighted."""
    return sum(varrho[c] * models[i] for c, i in enumerate(sampled))


@dataclass
class TrainTask:
    """Everything a run needs: task, network, data placement, and exact optimum."""

    model: LossModel
    clusters: list[ClusterSpec]
    parts: list[list[DevicePartition]]
    w0: np.ndarray
    w_star: np.ndarray
    f_star: float
    mu: float
    beta: float
    batch_size: Optional[int] = None
    eval_accuracy: bool = False
    n_labels: int = 2
    # fast-path quadratic statistics, filled by make_task for regression tasks
    quad_A: Optional[np.ndarray] = None
    quad_b: Optional[np.ndarray] = None
    global_quad: Optional[tuple] = None

    def __post_init__(self):
        if len(self.clusters) != len(self.parts):
            raise ValueError("clusters and parts must align")
        for spec, cluster_parts in zip(self.clusters, self.parts):
            if spec.size != len(cluster_parts):
                raise ValueError(f"cluster {spec.index}: spec size != number of partitions")
        self.varrho = cluster_weights(self.clusters)
        self.flat_parts = [p for c in self.parts for p in c]
        self.n_devices = len(self.flat_parts)
        offsets = np.cumsum([0] + [spec.size for spec in self.clusters])
        self.cluster_slices = [slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:])]
        self.all_X = np.concatenate([p.X for p in self.flat_parts])
        self.all_labels = np.concatenate([p.labels for p in self.flat_parts])

    def global_loss(self, w: np.ndarray) -> float:
        if self.global_quad is not None:
            A, b, c = self.global_quad
            return float(0.5 * w @ (A @ w) - b @ w + c)
        return losses.global_loss(self.model, w, self.parts)

    def accuracy(self, w: np.ndarray) -> float:
        return losses.accuracy(self.model, w, self.all_X, self.all_labels, self.n_labels)


def make_task(
    model: LossModel,
    clusters: list[ClusterSpec],
    parts: list[list[DevicePartition]],
    w0: Optional[np.ndarray] = None,
    batch_size: Optional[int] = None,
    eval_accuracy: bool = False,
    n_labels: int = 2,
) -> TrainTask:
    """Resolve the exact optimum and curvature constants and wire the fast paths."""
    mu, beta = losses.smoothness_constants(model, parts)
    w_star = losses.solve_optimum(model, parts)
    f_star = losses.global_loss(model, w_star, parts)
    task = TrainTask(
        model=model,
        clusters=clusters,
        parts=parts,
        w0=np.zeros(model.dim) if w0 is None else np.asarray(w0, dtype=float),
        w_star=w_star,
        f_star=f_star,
        mu=mu,
        beta=beta,
        batch_size=batch_size,
        eval_accuracy=eval_accuracy,
        n_labels=n_labels,
    )
    if model.kind == LINEAR_REGRESSION:
        A, b, c = losses.quadratic_stats(model, parts)
        task.quad_A, task.quad_b = A, b
        task.global_quad = (A.mean(axis=0), b.mean(axis=0), float(c.mean()))
    return task


@dataclass
class MetricsTrace:
    """Per-timestep protocol record plus per-aggregation control decisions."""

    t: np.ndarray
    loss_gap_sampled: np.ndarray
    loss_gap_avg: np.ndarray
    dispersion: np.ndarray
    eps_rms: np.ndarray
    gamma_total: np.ndarray
    energy: np.ndarray
    delay: np.ndarray
    gamma_by_cluster: np.ndarray
    boundaries: list[int]
    taus: list[int]
    accuracy: Optional[np.ndarray] = None
    control_rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    COLUMNS = (
        "t",
        "loss_gap_sampled",
        "loss_gap_avg",
        "dispersion",
        "eps_rms",
        "gamma_total",
        "energy_J",
        "delay_s",
    )

    def __len__(self):
        return len(self.t)

    def to_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for i in range(len(self.t)):
                row = [
                    str(int(self.t[i])),
                    repr(float(self.loss_gap_sampled[i])),
                    repr(float(self.loss_gap_avg[i])),
                    repr(float(self.dispersion[i])),
                    repr(float(self.eps_rms[i])),
                    str(int(self.gamma_total[i])),
                    repr(float(self.energy[i])),
                    repr(float(self.delay[i])),
                ]
                fh.write(",".join(row) + "\n")

    def control_to_csv(self, path):
        cols = ["k", "t_k", "tau_k", "alpha", "gamma_step", "phi", "delta_prime", "sigma2", "nu"]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols + ["gamma_by_cluster"])
            for row in self.control_rows:
                writer.writerow(
                    [row.get(c, "") for c in cols]
                    + [";".join(str(int(g)) for g in row.get("gamma_by_cluster", []))]
                )

    @staticmethod
    def from_csv(path) -> "MetricsTrace":
        arr = {c: [] for c in MetricsTrace.COLUMNS}
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for rec in reader:
                for c in MetricsTrace.COLUMNS:
                    arr[c].append(float(rec[c]))
        return MetricsTrace(
            t=np.array(arr["t"], dtype=int),
            loss_gap_sampled=np.array(arr["loss_gap_sampled"]),
            loss_gap_avg=np.array(arr["loss_gap_avg"]),
            dispersion=np.array(arr["dispersion"]),
            eps_rms=np.array(arr["eps_rms"]),
            gamma_total=np.array(arr["gamma_total"], dtype=int),
            energy=np.array(arr["energy_J"]),
            delay=np.array(arr["delay_s"]),
            gamma_by_cluster=np.zeros((len(arr["t"]), 0), dtype=int),
            boundaries=[],
            taus=[],
        )


# gamma providers ------------------------------------------------------------


def no_consensus_provider(t, local_step, cluster, w_tilde, eta_next):
    return 0


def fixed_gamma_provider(plan: GammaPlan):
    def provider(t, local_step, cluster, w_tilde, eta_next):
        if plan.mode == "none" or plan.value == 0:
            return 0
        return plan.value if local_step % plan.cadence == 0 else 0

    return provider


def certified_gamma_provider(plan: GammaPlan):
    """Rounds chosen so the contraction certificate meets the eta_t*phi error target."""
    from .consensus import divergence_exact
    from .control import gamma_rounds

    def provider(t, local_step, cluster, w_tilde, eta_next):
        upsilon = divergence_exact(w_tilde)
        return gamma_rounds(
            eta_next, plan.phi, cluster.size, upsilon, cluster.lambda_c, gamma_max=plan.max_rounds
        )

    return provider


def provider_from_plan(plan: GammaPlan):
    if plan.mode == "certified":
        return certified_gamma_provider(plan)
    if plan.mode == "fixed":
        return fixed_gamma_provider(plan)
    return no_consensus_provider


# engine ----------------------------------------------------------------------


def run_protocol(
    task: TrainTask,
    steps: StepSchedule,
    T: int,
    tau_provider: Callable[[int, int], int],
    gamma_provider: Callable,
    aggregation: str = SAMPLED,
    outage: Optional[OutagePolicy] = None,
    cost: Optional[CostParams] = None,
    seed: int = 0,
    on_aggregate: Optional[Callable] = None,
    radius_ref: Optional[np.ndarray] = None,
    topology_refresh: Optional[Callable] = None,
) -> MetricsTrace:
    """Run the full two-timescale protocol for T timesteps.

    tau_provider(k, t_km1) -> length of interval k (1-based k).
    gamma_provider(t, local_step, cluster_spec, w_tilde_c, eta_t) -> D2D rounds.
    on_aggregate(k, t_k, w_hat, W, estimate_rng) -> optional dict merged into the
    control row (the adaptive controller hooks its re-estimation logic here).
    radius_ref, when given, tracks the largest device-model distance from that
    reference over every gradient evaluation point (meta["max_radius"]).
    topology_refresh(k) -> new cluster specs, called between intervals when
    devices re-place (positions stay static within each interval either way).
    """
    if aggregation not in (SAMPLED, FULL):
        raise ValueError(f"unknown aggregation mode {aggregation!r}")
    cost = cost or CostParams()
    clusters = list(task.clusters)
    n_clusters = len(clusters)
    n_dev = task.n_devices
    upload_scale = 1.0 if aggregation == SAMPLED else n_dev / n_clusters

    rng_sampling = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_SAMPLING]))
    rng_estimate = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_ESTIMATE]))
    outage_rngs = [
        np.random.default_rng(np.random.SeedSequence([seed, _STREAM_OUTAGE, c]))
        for c in range(n_clusters)
    ]
    dev_rngs = device_rngs(seed, n_dev)

    W = np.tile(task.w0, (n_dev, 1)).astype(float)
    varrho = task.varrho
    max_radius = 0.0
    if radius_ref is not None:
        max_radius = float(np.linalg.norm(W - radius_ref, axis=1).max())

    def sample_indices():
        return [
            int(rng_sampling.integers(0, clusters[c].size)) + task.cluster_slices[c].start
            for c in range(n_clusters)
        ]

    sampled = sample_indices()

    rows = {name: [] for name in ("t", "gap_s", "gap_a", "disp", "eps", "gtot", "energy", "delay")}
    gamma_log = np.zeros((T, n_clusters), dtype=int)
    acc_log = [] if task.eval_accuracy else None
    control_rows: list[dict] = []
    boundaries: list[int] = []
    taus: list[int] = []

    k = 1
    t_km1 = 0
    tau_k = int(tau_provider(k, t_km1))
    if tau_k < 1:
        raise ValueError("tau_provider returned an interval shorter than 1")
    t_k = min(t_km1 + tau_k, T)

    def outage_policies():
        if outage is None or not outage.enabled:
            return None
        return [OutagePolicy(enabled=True, link_outage=spec.link_outage) for spec in clusters]

    per_cluster_outage = outage_policies()

    for t in range(1, T + 1):
        eta_prev = steps.eta(t - 1)
        eta_next = steps.eta(t)

        # local SGD step for every device
        if task.quad_A is not None and task.batch_size is None:
            grads = np.einsum("dij,dj->di", task.quad_A, W) - task.quad_b
        else:
            grads = np.empty_like(W)
            for d, part in enumerate(task.flat_parts):
                if task.batch_size is None:
                    grads[d] = losses.grad_full(task.model, W[d], part)
                else:
                    grads[d] = losses.grad_sgd(task.model, W[d], part, task.batch_size, dev_rngs[d])
        W_tilde = W - eta_prev * grads
        if np.isnan(W_tilde).any():
            bad = int(np.flatnonzero(np.isnan(W_tilde).any(axis=1))[0])
            raise RuntimeError(f"NaN model parameters at t={t} (device {bad}); aborting run")

        # per-cluster consensus
        W_new = np.empty_like(W_tilde)
        cluster_means = np.empty((n_clusters, task.model.dim))
        eps2_by_cluster = np.empty(n_clusters)
        local_step = t - t_km1
        for c, spec in enumerate(clusters):
            sl = task.cluster_slices[c]
            wt_c = W_tilde[sl]
            gamma = int(gamma_provider(t, local_step, spec, wt_c, eta_next))
            gamma_log[t - 1, c] = gamma
            policy = per_cluster_outage[c] if per_cluster_outage else None
            W_new[sl] = run_consensus(wt_c, spec.V, gamma, outage=policy, rng=outage_rngs[c])
            cluster_means[c] = wt_c.mean(axis=0)
            errs, _ = consensus_error(W_new[sl], wt_c)
            eps2_by_cluster[c] = float(np.mean(errs**2))
        W = W_new

        # metrics for this timestep; the server-equivalent model is the sampled
        # combination for TT-HF and the full weighted average for baselines
        w_bar = varrho @ cluster_means
        if aggregation == SAMPLED:
            w_hat_virtual = global_aggregate(W, varrho, sampled)
        else:
            w_hat_virtual = varrho @ np.stack(
                [W[task.cluster_slices[c]].mean(axis=0) for c in range(n_clusters)]
            )
        rows["t"].append(t)
        rows["gap_s"].append(task.global_loss(w_hat_virtual) - task.f_star)
        rows["gap_a"].append(task.global_loss(w_bar) - task.f_star)
        rows["disp"].append(dispersion_sample(cluster_means, varrho))
        rows["eps"].append(float(np.sqrt(varrho @ eps2_by_cluster)))
        g_total = int(gamma_log[t - 1].sum())
        rows["gtot"].append(g_total)
        sizes = np.array([spec.size for spec in clusters])
        energy = float((gamma_log[t - 1] * sizes).sum() * cost.e_d2d)
        delay = float(gamma_log[t - 1].sum() * cost.delta_d2d)
        if acc_log is not None:
            acc_log.append(task.accuracy(w_hat_virtual))

        if t == t_k:
            w_hat = w_hat_virtual
            energy += cost.e_glob * upload_scale
            delay += cost.delta_glob * upload_scale
            row = {
                "k": k,
                "t_k": t,
                "tau_k": tau_k,
                "sampled": list(sampled),
                "gamma_by_cluster": gamma_log[t_km1:t].sum(axis=0).tolist(),
            }
            if on_aggregate is not None:
                extra = on_aggregate(k, t, w_hat, W, rng_estimate)
                if extra:
                    row.update(extra)
            control_rows.append(row)
            boundaries.append(t)
            taus.append(tau_k)
            W = np.tile(w_hat, (n_dev, 1))
            sampled = sample_indices()
            t_km1 = t
            if t < T:
                if topology_refresh is not None:
                    fresh = topology_refresh(k + 1)
                    if fresh is not None:
                        if [s.size for s in fresh] != [s.size for s in clusters]:
                            raise ValueError("topology refresh must preserve cluster sizes")
                        clusters = list(fresh)
                        per_cluster_outage = outage_policies()
                k += 1
                tau_k = int(tau_provider(k, t_km1))
                if tau_k < 1:
                    raise ValueError("tau_provider returned an interval shorter than 1")
                t_k = min(t_km1 + tau_k, T)

        rows["energy"].append(energy)
        rows["delay"].append(delay)
        if radius_ref is not None:
            max_radius = max(max_radius, float(np.linalg.norm(W - radius_ref, axis=1).max()))

    return MetricsTrace(
        t=np.array(rows["t"], dtype=int),
        loss_gap_sampled=np.array(rows["gap_s"]),
        loss_gap_avg=np.array(rows["gap_a"]),
        dispersion=np.array(rows["disp"]),
        eps_rms=np.array(rows["eps"]),
        gamma_total=np.array(rows["gtot"], dtype=int),
        energy=np.array(rows["energy"]),
        delay=np.array(rows["delay"]),
        gamma_by_cluster=gamma_log,
        boundaries=boundaries,
        taus=taus,
        accuracy=np.array(acc_log) if acc_log is not None else None,
        control_rows=control_rows,
        meta={
            "seed": seed,
            "aggregation": aggregation,
            **({"max_radius": max_radius} if radius_ref is not None else {}),
        },
    )


def run_tthf(
    task: TrainTask,
    steps: StepSchedule,
    schedule: TrainingSchedule,
    gamma_plan: GammaPlan,
    outage: Optional[OutagePolicy] = None,
    cost: Optional[CostParams] = None,
    seed: int = 0,
    radius_ref=None,
    topology_refresh=None,
) -> MetricsTrace:
    """TT-HF with set control parameters: fixed interval plan, fixed/certified rounds."""
    taus = list(schedule.taus)

    def tau_provider(k, t_km1):
        return taus[k - 1] if k - 1 < len(taus) else taus[-1]

    return run_protocol(
        task,
        steps,
        schedule.T,
        tau_provider,
        provider_from_plan(gamma_plan),
        aggregation=SAMPLED,
        outage=outage,
        cost=cost,
        seed=seed,
        radius_ref=radius_ref,
        topology_refresh=topology_refresh,
    )


def run_baseline(
    task: TrainTask,
    steps: StepSchedule,
    T: int,
    tau: int,
    outage: Optional[OutagePolicy] = None,
    cost: Optional[CostParams] = None,
    seed: int = 0,
    topology_refresh=None,
) -> MetricsTrace:
    """Conventional federated averaging: no D2D rounds, full device participation."""
    return run_protocol(
        task,
        steps,
        T,
        lambda k, t_km1: tau,
        no_consensus_provider,
        aggregation=FULL,
        outage=outage,
        cost=cost,
        seed=seed,
        topology_refresh=topology_refresh,
    )
