import math
import unittest
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
import pandas as pd

from mf3net import metrics
from mf3net.data import make_grid_task
from mf3net.errors import ConfigError, StructuralError
from mf3net.finite_net import forward_batch
from mf3net.math_core import ModelSpec, constant_schedule, default_model
from mf3net.mf_system import drift_arrays, euler_evolve
from mf3net.models import NetworkParams, ParticleSystem
from mf3net.neuronal_embedding import IIDEmbedding, Law, sample_embedding
from mf3net.recorder import TrajectoryView, make_recorder
from mf3net.snapshots import load_params, save_params
from mf3net.stats import aggregate_by_level, fit_loglog


def make_view(times, w1, w2, w3, **extra) -> TrajectoryView:
    w1, w2, w3 = (np.asarray(w, dtype=np.float64) for w in (w1, w2, w3))
    return TrajectoryView(np.asarray(times, dtype=np.float64), w1, w2, w3, widths=(w1.shape[1], w3.shape[1]), **extra)


def random_view(rng: np.random.Generator, n_t: int = 4, k1: int = 3, k2: int = 2, d: int = 2) -> TrajectoryView:
    return make_view(
        np.linspace(0.0, 1.0, n_t),
        rng.normal(size=(n_t, k1, d)),
        rng.normal(size=(n_t, k1, k2)),
        rng.normal(size=(n_t, k2)),
    )


def embedding(seed: int) -> IIDEmbedding:
    return IIDEmbedding(Law.parse("normal:1"), Law.parse("uniform:1"), Law.parse("uniform:1"), seed, 2)


class CouplingDistanceTests(unittest.TestCase):
    def test_identical_trajectories(self) -> None:
        a = random_view(np.random.default_rng(0))
        dist = metrics.coupling_distance(a, a)
        self.assertEqual(dist.D_T, 0.0)
        self.assertFalse(np.any(dist.per_time))

    def test_shift_example(self) -> None:
        times = [0.0, 0.5, 1.0, 1.5]
        zeros1, zeros2, zeros3 = np.zeros((4, 1, 2)), np.zeros((4, 1, 1)), np.zeros((4, 1))
        b1, b2 = zeros1.copy(), zeros2.copy()
        b2[1, 0, 0] = 0.3
        b1[2, 0] = [0.3, 0.4]
        dist = metrics.coupling_distance(make_view(times, zeros1, zeros2, zeros3), make_view(times, b1, b2, zeros3))
        np.testing.assert_allclose(dist.per_time, [0.0, 0.3, 0.5, 0.0])
        np.testing.assert_allclose(dist.running_sup, [0.0, 0.3, 0.5, 0.5])
        self.assertAlmostEqual(dist.D_T, 0.5)

    def test_matches_naive_loop(self) -> None:
        rng = np.random.default_rng(1)
        a, b = random_view(rng, k1=4, k2=3), random_view(rng, k1=5, k2=3)
        dist = metrics.coupling_distance(a, b, overlap=(3, 2))
        running = 0.0
        for t in range(len(a)):
            worst = 0.0
            for j1 in range(3):
                worst = max(worst, math.sqrt(sum((a.w1[t, j1, i] - b.w1[t, j1, i]) ** 2 for i in range(2))))
                for j2 in range(2):
                    worst = max(worst, abs(a.w2[t, j1, j2] - b.w2[t, j1, j2]))
            for j2 in range(2):
                worst = max(worst, abs(a.w3[t, j2] - b.w3[t, j2]))
            running = max(running, worst)
            self.assertAlmostEqual(dist.per_time[t], worst, places=14)
            self.assertAlmostEqual(dist.running_sup[t], running, places=14)

    def test_rejects_mismatched_inputs(self) -> None:
        rng = np.random.default_rng(2)
        a = random_view(rng)
        with self.assertRaises(StructuralError):
            metrics.coupling_distance(a, random_view(rng, n_t=5))
        with self.assertRaises(StructuralError):
            metrics.coupling_distance(a, a, overlap=(9, 1))

    def test_sup_norms(self) -> None:
        a = make_view([0.0, 1.0], np.zeros((2, 1, 1)), [[[0.5]], [[-2.0]]], [[1.0], [0.25]])
        self.assertEqual(metrics.sup_norms(a), (2.0, 1.0))


class RiskAndGapTests(unittest.TestCase):
    def setUp(self) -> None:
        self.spec = make_grid_task(5, "sin")
        self.model = default_model(xi3=1.0)
        rng = np.random.default_rng(3)
        self.view = random_view(rng, n_t=3, k1=4, k2=3)

    def test_risk_uses_stored_outputs(self) -> None:
        yhat = np.stack([forward_batch(*self.view.snapshot(i), self.spec.xs, self.model).yhat for i in range(3)])
        stored = make_view(self.view.times, self.view.w1, self.view.w2, self.view.w3, yhat=yhat)
        np.testing.assert_allclose(
            metrics.risk_trajectory(stored, self.spec, self.model),
            metrics.risk_trajectory(self.view, self.spec, self.model),
            rtol=0,
            atol=1e-15,
        )

    def test_gap_of_identical_trajectories(self) -> None:
        report = metrics.test_function_gap(self.view, self.view, self.spec, self.model)
        self.assertEqual(report.sup_gap, 0.0)
        self.assertEqual(report.psi_name, "loss")
        self.assertEqual(report.per_time.shape, (3, 2))

    def test_gap_with_custom_psi(self) -> None:
        shifted = make_view(self.view.times, self.view.w1, self.view.w2, self.view.w3 + 1.0)
        report = metrics.test_function_gap(self.view, shifted, self.spec, self.model, psi=lambda y, yhat: yhat, psi_name="mean")
        self.assertGreater(report.sup_gap, 0.0)
        self.assertEqual(report.psi_name, "mean")

    def test_gap_bounded_by_output_deviation(self) -> None:
        rng = np.random.default_rng(7)
        lip = self.model.loss.bound_d2 * self.model.phi3.bound_deriv
        for _ in range(20):
            net = random_view(rng, n_t=3, k1=4, k2=3)
            mf = random_view(rng, n_t=3, k1=6, k2=5)
            gap = metrics.test_function_gap(net, mf, self.spec, self.model).per_time[:, 1]
            dh3 = [
                np.max(
                    np.abs(
                        forward_batch(*net.snapshot(i), self.spec.xs, self.model).h3
                        - forward_batch(*mf.snapshot(i), self.spec.xs, self.model).h3
                    )
                )
                for i in range(3)
            ]
            self.assertTrue(np.all(gap <= lip * np.asarray(dh3) + 1e-12))

    def test_overlap_block_cannot_drive_risk(self) -> None:
        partial = TrajectoryView(self.view.times, self.view.w1[:, :2], self.view.w2[:, :2], self.view.w3, widths=(4, 3))
        with self.assertRaises(StructuralError):
            metrics.risk_trajectory(partial, self.spec, self.model)


class StationarityTests(unittest.TestCase):
    def test_matches_drift(self) -> None:
        spec = make_grid_task(4, "sin")
        model = default_model()
        view = random_view(np.random.default_rng(4), n_t=2, k1=3, k2=3)
        stat = metrics.stationarity_monitor(view, spec, model)
        d2 = drift_arrays(*view.snapshot(1), spec, model).d2
        self.assertAlmostEqual(stat[1], float(np.max(np.mean(np.abs(d2), axis=1))), places=14)

    def test_decays_on_long_horizon(self) -> None:
        spec = make_grid_task(8, "sin", scale=0.25)
        model = default_model()
        rec = make_recorder(50.0, 0.05, 50)
        euler_evolve(ParticleSystem(*sample_embedding(embedding(seed=2), 40, 40)), spec, model, 50.0, 0.05, rec)
        view = rec.view()
        stat = metrics.stationarity_monitor(view, spec, model)
        self.assertAlmostEqual(float(view.times[1]), 1.0)
        self.assertLess(stat[-1], 0.1 * stat[1])

    def test_frozen_second_layer(self) -> None:
        base = default_model()
        model = ModelSpec(base.phi1, base.phi2, base.phi3, base.loss, constant_schedule(1.0, 0.0, 0.0))
        view = random_view(np.random.default_rng(5))
        np.testing.assert_array_equal(metrics.stationarity_monitor(view, make_grid_task(3), model), np.zeros(4))


class LipschitzTests(unittest.TestCase):
    def test_linear_flow(self) -> None:
        times = np.array([0.0, 0.5, 1.0])
        u = np.array([[0.0, 1.0], [1.0, 1.0], [2.0, -1.0]])
        w1 = np.stack([u * (1.0 + t) for t in times])
        diag = metrics.w1_lipschitz_diagnostic(times, w1)
        self.assertAlmostEqual(diag.lip_in_init, 2.0)
        np.testing.assert_allclose(diag.running_lip_in_init, [1.0, 1.5, 2.0])
        self.assertAlmostEqual(diag.lip_in_time, float(np.max(np.linalg.norm(u, axis=1))))

    def test_coincident_initial_points_are_skipped(self) -> None:
        times = np.array([0.0, 1.0])
        w1 = np.array([[[1.0], [1.0]], [[1.0], [2.0]]])
        diag = metrics.w1_lipschitz_diagnostic(times, w1)
        self.assertEqual(diag.lip_in_init, 0.0)

    def test_needs_two_points(self) -> None:
        with self.assertRaises(StructuralError):
            metrics.w1_lipschitz_diagnostic(np.array([0.0, 1.0]), np.zeros((2, 1, 2)))


class ErrorBoundTests(unittest.TestCase):
    def test_closed_form(self) -> None:
        value = metrics.coupling_error_envelope(0.01, 4, 16, 1.0, 0.1, 1.0)
        expected = math.exp(2.0) * (0.5 + 0.1) * math.sqrt(math.log(3 * 2 * 256 / 0.1 + math.e))
        self.assertAlmostEqual(value, expected, places=10)

    def test_overflow_gives_infinity(self) -> None:
        self.assertEqual(metrics.coupling_error_envelope(0.01, 4, 4, 10.0, 0.1, 5.0), math.inf)


class CsvTests(unittest.TestCase):
    def test_round_trip_keeps_floats(self) -> None:
        frame = pd.DataFrame({"t": [0.0, 0.1, 0.2], "D_t": [0.0, 1 / 3, math.pi]})
        with TemporaryDirectory() as tmp:
            path = Path(tmp) / "nested" / "out.csv"
            metrics.write_metric_csv(path, frame, {"n1": 4, "eps": 0.01})
            self.assertTrue(path.read_text().startswith("# n1=4,eps=0.01\n"))
            loaded, meta = metrics.read_metric_csv(path)
        pd.testing.assert_frame_equal(loaded, frame, check_exact=True)
        self.assertEqual(meta, {"n1": "4", "eps": "0.01"})

    def test_snapshot_files(self) -> None:
        rng = np.random.default_rng(6)
        net = NetworkParams(rng.normal(size=(3, 2)), rng.normal(size=(3, 4)), rng.normal(size=4), step_k=12)
        particles = ParticleSystem(net.w1, net.w2, net.w3, t=0.7)
        with TemporaryDirectory() as tmp:
            save_params(net, Path(tmp) / "net.csv")
            save_params(particles, Path(tmp) / "mf.csv")
            net_back = load_params(Path(tmp) / "net.csv")
            mf_back = load_params(Path(tmp) / "mf.csv")
        self.assertIsInstance(net_back, NetworkParams)
        self.assertEqual(net_back.step_k, 12)
        np.testing.assert_array_equal(net_back.w2, net.w2)
        self.assertIsInstance(mf_back, ParticleSystem)
        self.assertEqual(mf_back.t, 0.7)


class StatsTests(unittest.TestCase):
    def test_exact_power_law(self) -> None:
        levels = [4, 16, 64, 256]
        fit = fit_loglog(levels, [2.0 * n**-0.5 for n in levels])
        self.assertAlmostEqual(fit.slope, -0.5, places=12)
        self.assertLess(fit.stderr, 1e-12)
        np.testing.assert_allclose(fit.predict([100]), [0.2])

    def test_noisy_fit_stderr(self) -> None:
        levels = np.array([50.0, 100.0, 200.0, 400.0, 800.0])
        values = 3.0 * levels**-0.5 * np.exp([0.05, -0.08, 0.02, 0.06, -0.04])
        fit = fit_loglog(levels, values)
        x, y = np.log(levels), np.log(values)
        xm = x - x.mean()
        slope = np.dot(xm, y) / np.dot(xm, xm)
        resid = y - y.mean() - slope * xm
        stderr = np.sqrt(np.dot(resid, resid) / (x.size - 2) / np.dot(xm, xm))
        self.assertAlmostEqual(fit.slope, slope, places=12)
        self.assertAlmostEqual(fit.stderr, stderr, places=12)
        np.testing.assert_allclose(fit.residuals, resid, rtol=0, atol=1e-12)

    def test_rejects_degenerate_inputs(self) -> None:
        with self.assertRaises(ConfigError):
            fit_loglog([1, 2], [1, 2])
        with self.assertRaises(ConfigError):
            fit_loglog([1, 2, 3], [1.0, 0.0, 2.0])
        with self.assertRaises(ConfigError):
            fit_loglog([2, 2, 2], [1.0, 2.0, 3.0])

    def test_aggregate_by_level(self) -> None:
        raw = pd.DataFrame({"n_min": [8, 4, 4, 8], "seed": [1, 1, 0, 0], "D_T": [1.0, 2.0, 4.0, 3.0]})
        agg = aggregate_by_level(raw, "n_min")
        self.assertEqual(list(agg["n_min"]), [4, 8])
        np.testing.assert_allclose(agg["mean"], [3.0, 2.0])
        np.testing.assert_allclose(agg["stderr"], [1.0, 1.0])
        self.assertEqual(list(agg["seeds"]), [2, 2])


if __name__ == "__main__":
    unittest.main()
