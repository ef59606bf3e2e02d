"""Device placement, wireless channel, D2D graphs, and consensus matrices.

Graphs are built from the outage rule applied to the expected (Rayleigh-averaged)
SNR; per-round packet loss during consensus draws against the same outage
probability, link by link.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

DEFAULT_MIXING_STEP = 1.0 / 8.0


class DisconnectedGraphError(RuntimeError):
    """Cluster graph is disconnected; the consensus contraction certificate fails."""


@dataclass(frozen=True)
class ChannelParams:
    """Wireless D2D channel constants (dB quantities stored as given)."""

    noise_psd_dbm_hz: float = -173.0
    bandwidth_hz: float = 1e6
    tx_power_dbm: float = 24.0
    pathloss_ref_db: float = -30.0
    pathloss_exp: float = 3.75
    ref_dist_m: float = 1.0
    rate_bps: float = 14e6
    outage_threshold: float = 0.05

    def __post_init__(self):
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth must be positive")
        if not 0 < self.outage_threshold < 1:
            raise ValueError("outage threshold must lie in (0, 1)")
        if self.ref_dist_m <= 0:
            raise ValueError("reference distance must be positive")


def expected_snr(params: ChannelParams, distance_m: float) -> float:
    """Linear expected SNR at the given distance (Rayleigh power averaged to 1)."""
    if distance_m <= 0:
        raise ValueError("distance must be positive")
    if distance_m < params.ref_dist_m:
        warnings.warn(
            f"distance {distance_m} m below reference {params.ref_dist_m} m; clamping",
            stacklevel=2,
        )
        distance_m = params.ref_dist_m
    pathloss_db = params.pathloss_ref_db - 10.0 * params.pathloss_exp * np.log10(
        distance_m / params.ref_dist_m
    )
    noise_dbm = params.noise_psd_dbm_hz + 10.0 * np.log10(params.bandwidth_hz)
    snr_db = params.tx_power_dbm + pathloss_db - noise_dbm
    return float(10.0 ** (snr_db / 10.0))


def outage_prob(params: ChannelParams, snr_linear: float) -> float:
    """Probability that the instantaneous Rayleigh capacity falls below the rate."""
    if snr_linear <= 0:
        raise ValueError("snr must be positive")
    spectral_eff = params.rate_bps / params.bandwidth_hz
    return float(1.0 - np.exp(-(2.0**spectral_eff - 1.0) / snr_linear))


def place_devices(n_clusters: int, cluster_size: int, field_m: float, seed: int) -> list[np.ndarray]:
    """Uniform i.i.d. positions, one field per cluster."""
    if field_m <= 0:
        raise ValueError("field size must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70B0]))
    return [rng.uniform(0.0, field_m, size=(cluster_size, 2)) for _ in range(n_clusters)]


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def link_outage_matrix(positions: np.ndarray, params: ChannelParams) -> np.ndarray:
    """Per-pair outage probability from the expected SNR at the pair distance.

    Pairs closer than the pathloss reference distance (including co-located
    devices) are evaluated at the reference distance.
    """
    n = positions.shape[0]
    dists = pairwise_distances(positions)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = max(float(dists[i, j]), params.ref_dist_m)
            p = outage_prob(params, expected_snr(params, d))
            out[i, j] = out[j, i] = p
    return out


def build_graph(positions: np.ndarray, params: ChannelParams) -> np.ndarray:
    """Adjacency with an edge iff the pair's outage probability meets the threshold."""
    if positions.shape[0] < 1:
        raise ValueError("need at least one device")
    p_out = link_outage_matrix(positions, params)
    adj = p_out <= params.outage_threshold
    np.fill_diagonal(adj, False)
    return adj


def is_connected(adjacency: np.ndarray) -> bool:
    n = adjacency.shape[0]
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(adjacency[i]):
            if not seen[j]:
                seen[j] = True
                stack.append(int(j))
    return bool(seen.all())


def graph_diameter(adjacency: np.ndarray) -> int:
    """Longest shortest path, by BFS from every node."""
    n = adjacency.shape[0]
    if n == 1:
        return 0
    if not is_connected(adjacency):
        raise DisconnectedGraphError("diameter undefined on a disconnected graph")
    diam = 0
    for src in range(n):
        dist = np.full(n, -1)
        dist[src] = 0
        queue = [src]
        while queue:
            i = queue.pop(0)
            for j in np.flatnonzero(adjacency[i]):
                if dist[j] < 0:
                    dist[j] = dist[i] + 1
                    queue.append(int(j))
        diam = max(diam, int(dist.max()))
    return diam


def consensus_matrix(adjacency: np.ndarray, d_c: float) -> np.ndarray:
    """V = I - d_c * L for the common equal-weight construction."""
    adjacency = np.asarray(adjacency, dtype=bool)
    degrees = adjacency.sum(axis=1)
    max_degree = int(degrees.max()) if degrees.size else 0
    if max_degree > 0 and not 0.0 < d_c < 1.0 / max_degree:
        raise ValueError(f"d_c={d_c} outside the valid interval (0, {1.0 / max_degree:.6g})")
    if max_degree == 0 and not 0.0 < d_c < 1.0:
        raise ValueError(f"d_c={d_c} outside the valid interval (0, 1)")
    # diagonal as the explicit complement of the off-diagonal mass keeps row sums
    # at 1 up to a single rounding of the shared partial sum
    n = adjacency.shape[0]
    V = np.where(adjacency, d_c, 0.0)
    np.fill_diagonal(V, 1.0 - d_c * degrees)
    return V


def mixing_step(adjacency: np.ndarray, d_c: float = DEFAULT_MIXING_STEP) -> float:
    """The configured d_c, backed off to 0.9/D_c when the default is infeasible."""
    max_degree = int(np.asarray(adjacency).sum(axis=1).max())
    if max_degree > 0 and d_c >= 1.0 / max_degree:
        return 0.9 / max_degree
    return d_c


def spectral_radius(V: np.ndarray) -> float:
    """Largest |eigenvalue| of V deflated by the averaging projector."""
    n = V.shape[0]
    deflated = V - np.ones((n, n)) / n
    eigs = np.linalg.eigvalsh(deflated)
    lam = float(np.max(np.abs(eigs)))
    if lam >= 1.0 - 1e-12:
        raise DisconnectedGraphError(f"spectral radius {lam} >= 1; graph is disconnected")
    return lam


def check_mixing_assumptions(V: np.ndarray, adjacency: np.ndarray, atol: float = 1e-12):
    """Raise unless V satisfies sparsity, row stochasticity, symmetry, and contraction."""
    n = V.shape[0]
    off_graph = ~np.asarray(adjacency, dtype=bool) & ~np.eye(n, dtype=bool)
    if np.any(np.abs(V[off_graph]) > atol):
        raise ValueError("V has nonzero weight on a non-edge")
    if np.max(np.abs(V @ np.ones(n) - 1.0)) > atol:
        raise ValueError("V is not row stochastic")
    if np.max(np.abs(V - V.T)) > atol:
        raise ValueError("V is not symmetric")
    spectral_radius(V)  # raises if >= 1


@dataclass
class ClusterSpec:
    """One cluster's geometry, D2D graph, and certified consensus operator."""

    index: int
    positions: np.ndarray
    adjacency: np.ndarray
    V: np.ndarray
    lambda_c: float
    link_outage: np.ndarray
    diameter: int

    @property
    def size(self) -> int:
        return self.positions.shape[0]


def build_cluster(
    index: int,
    cluster_size: int,
    field_m: float,
    params: ChannelParams,
    d_c: float,
    seed: int,
    max_attempts: int = 100,
) -> ClusterSpec:
    """Place devices and derive the graph, re-seeding until the graph is connected."""
    for attempt in range(max_attempts):
        rng_seed = [seed, index, attempt]
        rng = np.random.default_rng(np.random.SeedSequence(rng_seed + [0x70B0]))
        positions = rng.uniform(0.0, field_m, size=(cluster_size, 2))
        adjacency = build_graph(positions, params)
        if cluster_size == 1 or is_connected(adjacency):
            step = mixing_step(adjacency, d_c)
            V = consensus_matrix(adjacency, step)
            return ClusterSpec(
                index=index,
                positions=positions,
                adjacency=adjacency,
                V=V,
                lambda_c=spectral_radius(V) if cluster_size > 1 else 0.0,
                link_outage=link_outage_matrix(positions, params),
                diameter=graph_diameter(adjacency),
            )
    raise DisconnectedGraphError(
        f"cluster {index}: no connected layout after {max_attempts} placements"
    )


def build_network(
    n_clusters: int,
    cluster_size: int,
    field_m: float,
    params: ChannelParams,
    d_c: float = DEFAULT_MIXING_STEP,
    seed: int = 0,
    max_attempts: int = 100,
) -> list[ClusterSpec]:
    return [
        build_cluster(c, cluster_size, field_m, params, d_c, seed, max_attempts)
        for c in range(n_clusters)
    ]


def cluster_weights(clusters: list[ClusterSpec]) -> np.ndarray:
    """Relative cluster sizes varrho_c = s_c / I."""
    sizes = np.array([c.size for c in clusters], dtype=float)
    return sizes / sizes.sum()


def network_to_json(clusters: list[ClusterSpec], params: ChannelParams, path):
    payload = {
        "channel": asdict(params),
        "clusters": [
            {
                "index": c.index,
                "positions": c.positions.tolist(),
                "adjacency": c.adjacency.astype(int).tolist(),
                "V": c.V.tolist(),
                "lambda_c": c.lambda_c,
                "link_outage": c.link_outage.tolist(),
                "diameter": c.diameter,
            }
            for c in clusters
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def network_from_json(path) -> tuple[list[ClusterSpec], ChannelParams]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    params = ChannelParams(**payload["channel"])
    clusters = [
        ClusterSpec(
            index=entry["index"],
            positions=np.array(entry["positions"], dtype=float),
            adjacency=np.array(entry["adjacency"], dtype=bool),
            V=np.array(entry["V"], dtype=float),
            lambda_c=float(entry["lambda_c"]),
            link_outage=np.array(entry["link_outage"], dtype=float),
            diameter=int(entry["diameter"]),
        )
        for entry in payload["clusters"]
    ]
    return clusters, params
