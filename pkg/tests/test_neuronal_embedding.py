"""i.i.d. 嵌入的嵌套性与耦合过程。"""

import numpy as np
import pandas as pd
import pytest

from mf3net.data import DataSpec, make_grid_task
from mf3net.errors import AssumptionViolation, ConfigError
from mf3net.math_core import ModelSpec, constant_schedule, default_model
from mf3net.models import NetworkParams, ParticleSystem
from mf3net.neuronal_embedding import (
    CoupledPair,
    IIDEmbedding,
    Law,
    LawKind,
    couple,
    run_coupled,
    sample_embedding,
)


def embedding(seed: int = 7, rho2: str = "uniform:1", rho3: str = "uniform:1") -> IIDEmbedding:
    return IIDEmbedding(Law.parse("normal:1"), Law.parse(rho2), Law.parse(rho3), seed, 2)


def one_atom_spec() -> DataSpec:
    return DataSpec.from_atoms([(np.array([0.5, 1.0]), 0.5, 1.0)])


def mean_and_stderr(values) -> tuple:
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


class TestLaw:
    def test_parse_and_render(self):
        law = Law.parse(" uniform:0.5 ")
        assert law.kind is LawKind.UNIFORM and law.param == 0.5
        assert str(law) == "uniform:0.5"
        assert Law.parse("point:-2").sup == 2.0

    def test_rejects_malformed(self):
        for text in ("gauss:1", "normal", "uniform:-1", "point:nan"):
            with pytest.raises(ConfigError):
                Law.parse(text)

    def test_boundedness(self):
        assert not Law.parse("normal:1").bounded
        assert Law.parse("normal:0").bounded
        with pytest.raises(AssumptionViolation):
            Law.parse("normal:1").atoms(3)

    def test_uniform_atoms_are_midpoints(self):
        np.testing.assert_allclose(Law.parse("uniform:1").atoms(4), [-0.75, -0.25, 0.25, 0.75])


class TestSampleEmbedding:
    def test_smaller_width_is_prefix(self):
        e = embedding()
        small = sample_embedding(e, 5, 4)
        large = sample_embedding(e, 10, 8)
        np.testing.assert_array_equal(small[0], large[0][:5])
        np.testing.assert_array_equal(small[1], large[1][:5, :4])
        np.testing.assert_array_equal(small[2], large[2][:4])

    def test_point_laws(self):
        e = embedding(rho2="point:0.3", rho3="point:-1")
        _, w2, w3 = sample_embedding(e, 3, 4)
        assert np.all(w2 == 0.3)
        assert np.all(w3 == -1.0)

    def test_uniform_support(self):
        _, w2, _ = sample_embedding(embedding(rho2="uniform:0.5"), 40, 40)
        assert np.max(np.abs(w2)) <= 0.5

    def test_unbounded_second_layer_rejected(self):
        with pytest.raises(AssumptionViolation):
            embedding(rho2="normal:1")
        with pytest.raises(AssumptionViolation):
            embedding(rho3="normal:0.1")

    def test_third_layer_mean_is_clt_small(self):
        w3 = sample_embedding(embedding(seed=11), 1, 10_000)[2]
        assert abs(w3.mean()) <= 3.0 * (1.0 / np.sqrt(3.0)) / 100.0
        assert w3.var() == pytest.approx(1.0 / 3.0, rel=0.05)

    def test_first_layer_moments(self):
        w1 = sample_embedding(embedding(seed=12), 10_000, 1)[0]
        assert abs(w1.mean()) <= 3.0 / np.sqrt(w1.size)
        assert w1.var() == pytest.approx(1.0, rel=0.05)

    def test_seed_changes_draws(self):
        a = sample_embedding(embedding(seed=1), 4, 4)[1]
        b = sample_embedding(embedding(seed=2), 4, 4)[1]
        assert not np.array_equal(a, b)


class TestCouple:
    def test_block_structure(self):
        pair = couple(embedding(), 3, 2, 9, 6)
        assert pair.index_map == (3, 2)
        np.testing.assert_array_equal(pair.net.w2, pair.particles.w2[:3, :2])

    def test_requires_domination(self):
        with pytest.raises(ConfigError):
            couple(embedding(), 4, 4, 3, 8)


class TestRunCoupled:
    def setup_method(self):
        self.spec = make_grid_task(4, "sin")
        self.model = default_model(xi3=1.0)

    def test_starts_at_zero_distance(self):
        record = run_coupled(couple(embedding(), 3, 3, 12, 12), self.spec, self.model, 0.2, 0.01, record_intervals=4)
        assert record.distance.per_time[0] == 0.0
        assert np.all(np.diff(record.distance.running_sup) >= 0)
        assert record.D_T == pytest.approx(float(np.max(record.distance.per_time)))

    def test_frozen_schedule_has_no_deviation(self):
        base = default_model()
        frozen = ModelSpec(base.phi1, base.phi2, base.phi3, base.loss, constant_schedule(0.0, 0.0, 0.0))
        record = run_coupled(couple(embedding(), 2, 2, 6, 6), self.spec, frozen, 0.5, 0.05)
        assert record.D_T == 0.0
        assert not np.any(record.distance.dev_w1)

    def test_horizon_must_be_step_multiple(self):
        with pytest.raises(ConfigError):
            run_coupled(couple(embedding(), 2, 2, 4, 4), self.spec, self.model, 0.25, 0.1)

    def test_reruns_are_bit_identical(self):
        frames = [
            run_coupled(couple(embedding(), 3, 2, 8, 6), self.spec, self.model, 0.3, 0.01, data_seed=5).to_frame()
            for _ in range(2)
        ]
        pd.testing.assert_frame_equal(frames[0], frames[1], check_exact=True)

    def test_concurrent_legs_match_sequential(self):
        args = (self.spec, self.model, 0.3, 0.01)
        seq = run_coupled(couple(embedding(), 3, 2, 8, 6), *args, data_seed=5)
        par = run_coupled(couple(embedding(), 3, 2, 8, 6), *args, data_seed=5, concurrent_legs=True)
        np.testing.assert_array_equal(seq.distance.per_time, par.distance.per_time)
        np.testing.assert_array_equal(seq.net_view.w2, par.net_view.w2)

    def test_finer_ode_step_on_shared_grid(self):
        record = run_coupled(couple(embedding(), 2, 2, 6, 6), self.spec, self.model, 0.2, 0.02, h=0.01)
        assert record.h == 0.01
        np.testing.assert_allclose(record.net_view.times, record.mf_view.times)

    def test_wider_networks_track_particles_closer(self):
        spec = one_atom_spec()

        def mean_distance(n: int) -> float:
            return float(
                np.mean(
                    [
                        run_coupled(couple(embedding(seed=s), n, n, 4 * n, 4 * n), spec, self.model, 1.0, 0.01).D_T
                        for s in range(10)
                    ]
                )
            )

        assert mean_distance(128) < mean_distance(16)

    def test_relabeling_particles_keeps_distance_law(self):
        n, m, seeds = 3, 6, range(16)
        plain, relabeled = [], []
        for s in seeds:
            pair = couple(embedding(seed=s), n, n, m, m)
            order = np.random.default_rng(100 + s)
            p1, p2 = order.permutation(m), order.permutation(m)
            w1 = pair.particles.w1[p1].copy()
            w2 = pair.particles.w2[np.ix_(p1, p2)].copy()
            w3 = pair.particles.w3[p2].copy()
            shuffled = CoupledPair(
                NetworkParams(w1[:n].copy(), w2[:n, :n].copy(), w3[:n].copy()), ParticleSystem(w1, w2, w3)
            )
            plain.append(run_coupled(pair, self.spec, self.model, 0.3, 0.01, data_seed=s).D_T)
            relabeled.append(run_coupled(shuffled, self.spec, self.model, 0.3, 0.01, data_seed=s).D_T)
        mean_a, se_a = mean_and_stderr(plain)
        mean_b, se_b = mean_and_stderr(relabeled)
        assert abs(mean_a - mean_b) <= 2.0 * np.hypot(se_a, se_b)

    def test_frame_columns(self):
        record = run_coupled(couple(embedding(), 2, 2, 4, 4), self.spec, self.model, 0.1, 0.01, seed_label=9)
        frame = record.to_frame()
        assert list(frame.columns) == ["t", "dev_w1", "dev_w2", "dev_w3", "D_t", "n1", "n2", "m1", "m2", "eps", "seed"]
        assert set(frame["seed"]) == {9}
