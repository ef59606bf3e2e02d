"""Shared builders for the test suite."""

from __future__ import annotations

import warnings

import numpy as np
import pytest

from tthf import data, losses, topology, trainer

warnings.filterwarnings("ignore", message="distance .* below reference")


def random_connected_adjacency(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random spanning tree plus extra edges; always connected."""
    adj = np.zeros((n, n), dtype=bool)
    order = rng.permutation(n)
    for i in range(1, n):
        j = order[rng.integers(0, i)]
        adj[order[i], j] = adj[j, order[i]] = True
    extra = rng.integers(0, n)
    for _ in range(extra):
        i, j = rng.integers(0, n, size=2)
        if i != j:
            adj[i, j] = adj[j, i] = True
    return adj


def random_mixing_matrix(rng: np.random.Generator, n: int):
    """(V, adjacency, lambda_c) for a random connected graph."""
    adj = random_connected_adjacency(rng, n)
    max_deg = int(adj.sum(axis=1).max())
    d = rng.uniform(0.2, 0.95) / max_deg
    V = topology.consensus_matrix(adj, d)
    return V, adj, topology.spectral_radius(V)


def build_small_task(
    mode="extreme",
    n_clusters=4,
    cluster_size=3,
    m=4,
    n_labels=4,
    per_label=60,
    separation=2.0,
    reg=0.5,
    kind=losses.LINEAR_REGRESSION,
    batch_size=None,
    seed=3,
    field_m=50.0,
    eval_accuracy=False,
):
    ds = data.gen_synthetic(m, n_labels, per_label, separation, seed)
    model = losses.LossModel(kind=kind, reg=reg, dim=m)
    n_dev = n_clusters * cluster_size
    flat = data.partition(ds, n_dev, data.PartitionPlan(mode, seed=seed + 1), kind=kind)
    clusters = topology.build_network(
        n_clusters, cluster_size, field_m, topology.ChannelParams(), seed=seed + 2
    )
    parts = [flat[i * cluster_size : (i + 1) * cluster_size] for i in range(n_clusters)]
    return trainer.make_task(
        model, clusters, parts, batch_size=batch_size, n_labels=n_labels, eval_accuracy=eval_accuracy
    )


@pytest.fixture(scope="session")
def small_task():
    return build_small_task()
