"""Protocol loop semantics: SGD steps, aggregation, broadcast resets, determinism."""

import numpy as np
import pytest

from tthf import losses, trainer
from tthf.losses import LINEAR_REGRESSION, DevicePartition, LossModel
from tthf.schedules import GammaPlan, StepSchedule, TrainingSchedule
from tthf.topology import ClusterSpec

from conftest import build_small_task


def singleton_cluster(index, part):
    return ClusterSpec(
        index=index,
        positions=np.zeros((1, 2)),
        adjacency=np.zeros((1, 1), dtype=bool),
        V=np.ones((1, 1)),
        lambda_c=0.0,
        link_outage=np.zeros((1, 1)),
        diameter=0,
    )


class TestLocalSgdStep:
    def test_zero_step_is_identity(self):
        rng = np.random.default_rng(0)
        model = LossModel(LINEAR_REGRESSION, reg=0.1, dim=3)
        part = DevicePartition(0, rng.standard_normal((6, 3)), rng.standard_normal(6))
        w = rng.standard_normal(3)
        np.testing.assert_array_equal(trainer.local_sgd_step(model, w, part, 0.0), w)

    def test_descent_under_small_step(self):
        rng = np.random.default_rng(1)
        model = LossModel(LINEAR_REGRESSION, reg=0.1, dim=3)
        part = DevicePartition(0, rng.standard_normal((10, 3)), rng.standard_normal(10))
        _, beta = losses.smoothness_constants(model, [[part]])
        w = rng.standard_normal(3)
        w_next = trainer.local_sgd_step(model, w, part, 1.0 / beta)
        assert losses.local_loss(model, w_next, part) <= losses.local_loss(model, w, part)

    def test_matches_axpy_composition(self):
        rng = np.random.default_rng(2)
        model = LossModel(LINEAR_REGRESSION, reg=0.0, dim=4)
        part = DevicePartition(0, rng.standard_normal((8, 4)), rng.standard_normal(8))
        w = rng.standard_normal(4)
        g = losses.grad_sgd(model, w, part, 3, np.random.default_rng(7))
        composed = w - 0.05 * g
        stepped = trainer.local_sgd_step(model, w, part, 0.05, np.random.default_rng(7), batch_size=3)
        np.testing.assert_allclose(stepped, composed, atol=1e-15)


class TestGlobalAggregate:
    def test_identical_models(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal(4)
        out = trainer.global_aggregate([w, w, w], np.array([0.5, 0.25, 0.25]), [0, 1, 2])
        np.testing.assert_allclose(out, w)

    def test_resampling_expectation_matches_cluster_means(self):
        task = build_small_task()
        rng = np.random.default_rng(4)
        W = rng.standard_normal((task.n_devices, task.model.dim))
        cluster_means = np.stack(
            [W[task.cluster_slices[c]].mean(axis=0) for c in range(len(task.clusters))]
        )
        expected = task.varrho @ cluster_means
        draws = []
        for _ in range(10_000):
            sampled = [
                int(rng.integers(0, spec.size)) + task.cluster_slices[c].start
                for c, spec in enumerate(task.clusters)
            ]
            draws.append(trainer.global_aggregate(W, task.varrho, sampled))
        draws = np.stack(draws)
        sem = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - expected) < 4 * sem + 1e-12)


class TestDegenerateCentralizedEquivalence:
    def test_matches_gradient_descent_trajectory(self):
        # singleton clusters, tau=1, full batch, no consensus -> centralized GD
        rng = np.random.default_rng(5)
        model = LossModel(LINEAR_REGRESSION, reg=0.3, dim=3)
        parts_flat = [
            DevicePartition(i, rng.standard_normal((6, 3)), rng.standard_normal(6))
            for i in range(4)
        ]
        clusters = [singleton_cluster(i, p) for i, p in enumerate(parts_flat)]
        task = trainer.make_task(model, clusters, [[p] for p in parts_flat])
        steps = StepSchedule(kind="constant", eta_const=0.05)
        trace = trainer.run_tthf(
            task, steps, TrainingSchedule.uniform(30, 1), GammaPlan(mode="none"), seed=0
        )
        w = task.w0.copy()
        gaps = []
        for _ in range(30):
            g = sum(losses.grad_full(model, w, p) for p in parts_flat) / 4
            w = w - 0.05 * g
            gaps.append(task.global_loss(w) - task.f_star)
        np.testing.assert_allclose(trace.loss_gap_sampled, gaps, atol=1e-10)


class TestTrendExamples:
    def test_more_rounds_lower_final_loss_on_heterogeneous_data(self):
        # toy-scale directional check; the full ordering is exercised at
        # network scale in the acceptance suite
        task = build_small_task(mode="extreme", per_label=100)
        steps = StepSchedule(kind="constant", eta_const=0.5 / task.beta)
        finals = {}
        for gamma in (0, 5):
            gaps = []
            for seed in (11, 12, 13):
                trace = trainer.run_tthf(
                    task,
                    steps,
                    TrainingSchedule.uniform(100, 20),
                    GammaPlan(mode="fixed", value=gamma, cadence=5),
                    seed=seed,
                )
                gaps.append(float(np.mean(trace.loss_gap_sampled[-20:])))
            finals[gamma] = float(np.mean(gaps))
        assert finals[5] < finals[0]


@pytest.fixture(scope="module")
def trace():
    task = build_small_task()
    steps = StepSchedule(kind="diminishing", gamma=2 / task.mu, alpha=50.0)
    return trainer.run_tthf(
        task,
        steps,
        TrainingSchedule.uniform(47, 10),
        GammaPlan(mode="fixed", value=2, cadence=5),
        seed=21,
    )


class TestTraceInvariants:

    def test_one_record_per_timestep(self, trace):
        np.testing.assert_array_equal(trace.t, np.arange(1, 48))

    def test_boundaries_cover_horizon(self, trace):
        assert trace.boundaries == [10, 20, 30, 40, 47]
        assert trace.taus == [10, 10, 10, 10, 7]

    def test_csv_column_order(self, trace, tmp_path):
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "t,loss_gap_sampled,loss_gap_avg,dispersion,eps_rms,gamma_total,energy_J,delay_s"

    def test_csv_round_trip(self, trace, tmp_path):
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        back = trainer.MetricsTrace.from_csv(path)
        np.testing.assert_array_equal(back.t, trace.t)
        np.testing.assert_array_equal(back.loss_gap_sampled, trace.loss_gap_sampled)
        np.testing.assert_array_equal(back.energy, trace.energy)


class TestBroadcastReset:
    def test_dispersion_restarts_after_aggregation(self):
        task = build_small_task(mode="extreme")
        steps = StepSchedule(kind="constant", eta_const=0.3 / task.beta)
        trace = trainer.run_tthf(
            task, steps, TrainingSchedule.uniform(40, 10), GammaPlan(mode="none"), seed=3
        )
        for t_k in trace.boundaries[:-1]:
            # first step of the next interval starts from a common broadcast model,
            # so its dispersion must collapse relative to the interval end
            assert trace.dispersion[t_k] < trace.dispersion[t_k - 1] * 0.5


class TestDeterminism:
    def test_identical_seed_identical_trace_bytes(self, tmp_path):
        task = build_small_task(batch_size=4)
        steps = StepSchedule(kind="diminishing", gamma=2 / task.mu, alpha=40.0)
        blobs = []
        for run in range(2):
            trace = trainer.run_tthf(
                task,
                steps,
                TrainingSchedule.uniform(25, 5),
                GammaPlan(mode="fixed", value=1, cadence=5),
                seed=123,
            )
            path = tmp_path / f"t{run}.csv"
            trace.to_csv(path)
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_different_seeds_differ(self):
        task = build_small_task(batch_size=4)
        steps = StepSchedule(kind="constant", eta_const=0.02)
        traces = [
            trainer.run_tthf(
                task,
                steps,
                TrainingSchedule.uniform(10, 5),
                GammaPlan(mode="none"),
                seed=s,
            )
            for s in (1, 2)
        ]
        assert not np.array_equal(traces[0].loss_gap_sampled, traces[1].loss_gap_sampled)


class TestBaseline:
    def test_full_participation_aggregates_all_devices(self):
        task = build_small_task()
        steps = StepSchedule(kind="constant", eta_const=0.2 / task.beta)
        trace = trainer.run_baseline(task, steps, 20, 5, seed=9)
        # sampled and average gaps coincide for full participation
        np.testing.assert_allclose(trace.loss_gap_sampled, trace.loss_gap_avg, atol=1e-12)

    def test_baseline_energy_scales_with_device_count(self):
        task = build_small_task()  # 4 clusters x 3 devices
        steps = StepSchedule(kind="constant", eta_const=0.1 / task.beta)
        base = trainer.run_baseline(task, steps, 10, 5, seed=1)
        tthf = trainer.run_tthf(
            task, steps, TrainingSchedule.uniform(10, 5), GammaPlan(mode="none"), seed=1
        )
        # 2 aggregations each; full participation uploads I/N = 3x more
        assert base.energy.sum() == pytest.approx(3.0 * tthf.energy.sum())


class TestNanGuard:
    @pytest.mark.filterwarnings("ignore:overflow")
    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_divergent_step_aborts_with_timestep(self):
        task = build_small_task()
        steps = StepSchedule(kind="constant", eta_const=1e12)
        with pytest.raises(RuntimeError, match="NaN .* t="):
            trainer.run_tthf(
                task,
                steps,
                TrainingSchedule.uniform(500, 10),
                GammaPlan(mode="none"),
                seed=2,
            )
