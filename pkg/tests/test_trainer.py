import numpy as np
import pytest

import scalednn as s
from scalednn import kernels as kk
from conftest import rel_gap


def fresh(n1=4, n2=8, g1=0.6, g2=0.8, seed=0, d=3, consts=()):
    sc = s.ScalingConfig((n1, n2), (g1, g2))
    law = s.InitLaw.default(n1, d, seed)
    rates = s.rates_two_layer(n1, n2, g1, g2, *consts) if consts else \
        s.rates_two_layer(n1, n2, g1, g2)
    th = s.init_params(sc, law, seed)
    return sc, law, rates, th


class TestSingleStep:
    def test_unit_width_update_by_hand(self):
        sc = s.ScalingConfig((1, 1), (0.5, 0.5))
        rates = s.rates_two_layer(1, 1, 0.5, 0.5, 2.0, 3.0, 4.0)
        th = s.Theta(np.array([[1.0, 0.0]]), (np.array([[2.0]]),), np.array([3.0]))
        x = np.array([1.0, 0.5])
        y = 0.25
        z1 = 1.0 * x[0] + 0.0 * x[1]
        h1 = np.tanh(z1)
        z2 = 2.0 * h1
        h2 = np.tanh(z2)
        r = y - 3.0 * h2
        dsig = lambda u: 1.0 / np.cosh(u) ** 2
        want_C = 3.0 + 2.0 * r * h2
        d2 = r * 3.0 * dsig(z2)
        want_W2 = 2.0 + 4.0 * h1 * d2
        d1 = 2.0 * d2 * dsig(z1)
        want_W1 = np.array([1.0, 0.0]) + 3.0 * d1 * x
        new = s.sgd_step_two_layer(sc, rates, th, x, y)
        assert new.C[0] == pytest.approx(want_C, rel=1e-14)
        assert new.inner[0][0, 0] == pytest.approx(want_W2, rel=1e-14)
        assert rel_gap(new.W1[0], want_W1) < 1e-14

    def test_zero_residual_is_a_fixed_point(self):
        sc, law, rates, th = fresh()
        x = np.array([0.2, -0.4, 0.1])
        y = float(s.forward(sc, th, x).g)
        new = s.sgd_step_two_layer(sc, rates, th, x, y)
        for (_, a), (_, b) in zip(th.groups(), new.groups()):
            assert np.array_equal(a, b)

    def test_step_leaves_the_input_untouched(self):
        sc, law, rates, th = fresh()
        before = th.copy()
        s.sgd_step_two_layer(sc, rates, th, np.array([0.2, -0.4, 0.1]), 1.0)
        for (_, a), (_, b) in zip(th.groups(), before.groups()):
            assert np.array_equal(a, b)

    def test_depth_guards(self):
        sc, law, rates, th = fresh()
        with pytest.raises(s.DomainError, match="sgd_step_three_layer needs depth 3"):
            s.sgd_step_three_layer(sc, rates, th, np.zeros(3), 1.0)
        sc3 = s.ScalingConfig((2, 3, 4), (0.5, 0.5, 0.5))
        r3 = s.rates_three_layer(2, 3, 4, 0.5, 0.5, 0.5)
        th3 = s.init_params(sc3, s.InitLaw.default(2, 3, 0), 0)
        with pytest.raises(s.DomainError, match="sgd_step_two_layer needs depth 2"):
            s.sgd_step_two_layer(sc3, r3, th3, np.zeros(3), 1.0)

    def test_zero_outer_weights_block_inner_learning(self):
        # every inner gradient carries a factor of C
        sc3 = s.ScalingConfig((2, 3, 4), (0.5, 0.5, 0.5))
        r3 = s.rates_three_layer(2, 3, 4, 0.5, 0.5, 0.5)
        law0 = s.InitLaw(np.ones((2, 3)), s.Law1D.rademacher(), s.Law1D.point_mass(0.0))
        th = s.init_params(sc3, law0, 1)
        new = s.sgd_step_three_layer(sc3, r3, th, np.array([0.1, 0.2, 0.3]), 1.0)
        assert np.array_equal(new.W1, th.W1)
        assert np.array_equal(new.inner[0], th.inner[0])
        assert np.array_equal(new.inner[1], th.inner[1])
        assert np.abs(new.C - th.C).max() > 0.0

    def test_increments_halve_when_top_width_doubles_at_gamma_one(self, dataset3):
        x = dataset3.X[0]

        def mean_incr(n2):
            out = []
            for seed in range(8):
                law = s.InitLaw.default(10, 3, 0)
                sc = s.ScalingConfig((10, n2), (1.0, 1.0))
                rates = s.rates_two_layer(10, n2, 1.0, 1.0)
                th = s.init_params(sc, law, seed)
                y = float(s.forward(sc, th, x).g) + 1.0  # unit residual
                new = s.sgd_step_two_layer(sc, rates, th, x, y)
                out.append([
                    np.abs(new.C - th.C).mean(),
                    np.sqrt(np.sum((new.W1 - th.W1) ** 2, axis=1)).mean(),
                    np.abs(new.inner[0] - th.inner[0]).mean(),
                ])
            return np.mean(out, axis=0)

        ratios = mean_incr(400) / mean_incr(200)
        assert np.all(ratios > 0.375) and np.all(ratios < 0.625)

    def test_w_increments_follow_the_inner_width_exponent(self, dataset3):
        # gamma1 = 1/2: both W groups shrink like 1/sqrt(N1)
        x = dataset3.X[0]

        def mean_incr(n1):
            out = []
            for seed in range(32):
                law = s.InitLaw.default(n1, 3, 0)
                sc = s.ScalingConfig((n1, 200), (0.5, 1.0))
                rates = s.rates_two_layer(n1, 200, 0.5, 1.0)
                th = s.init_params(sc, law, seed)
                y = float(s.forward(sc, th, x).g) + 1.0
                new = s.sgd_step_two_layer(sc, rates, th, x, y)
                out.append([
                    np.sqrt(np.sum((new.W1 - th.W1) ** 2, axis=1)).mean(),
                    np.abs(new.inner[0] - th.inner[0]).mean(),
                ])
            return np.mean(out, axis=0)

        ratios = mean_incr(128) / mean_incr(8)  # width factor 16, expect 1/4
        assert np.all(ratios / 0.25 > 0.75) and np.all(ratios / 0.25 < 1.25)


class TestTrainLoop:
    def test_deterministic_in_seed(self, dataset3, law10):
        sc = s.ScalingConfig((10, 32), (0.5, 0.75))
        rates = s.rates_two_layer(10, 32, 0.5, 0.75)
        tc = s.TrainConfig(sc, rates, n_steps=20, record_stride=5, seed=3)
        a = s.train(tc, dataset3, law10)
        b = s.train(tc, dataset3, law10)
        assert np.array_equal(a.times, b.times)
        assert np.array_equal(a.h, b.h)
        for g in a.max_abs:
            assert np.array_equal(a.max_abs[g], b.max_abs[g])
        for (_, xa), (_, xb) in zip(a.theta.groups(), b.theta.groups()):
            assert np.array_equal(xa, xb)

    def test_times_are_steps_over_top_width(self, dataset3, law10):
        sc = s.ScalingConfig((10, 32), (0.5, 0.75))
        rates = s.rates_two_layer(10, 32, 0.5, 0.75)
        tc = s.TrainConfig(sc, rates, n_steps=10, record_stride=4, seed=0)
        tr = s.train(tc, dataset3, law10)
        assert np.array_equal(tr.times, np.array([0, 4, 8, 10]) / 32.0)
        tc2 = s.TrainConfig(sc, rates, horizon=1.0, record_stride=32, seed=0)
        assert tc2.steps == 32

    def test_zero_steps_returns_the_initial_state(self, dataset3, law10):
        sc = s.ScalingConfig((10, 32), (0.5, 0.75))
        rates = s.rates_two_layer(10, 32, 0.5, 0.75)
        tc = s.TrainConfig(sc, rates, n_steps=0, record_stride=1, seed=7)
        tr = s.train(tc, dataset3, law10)
        assert tr.n_records == 1 and tr.times[0] == 0.0
        th0 = s.init_params(sc, law10, 7)
        assert rel_gap(tr.h[0], s.forward_batch(sc, th0, dataset3.X)) == 0.0
        for (_, xa), (_, xb) in zip(tr.theta.groups(), th0.groups()):
            assert np.array_equal(xa, xb)

    def test_single_sample_run_equals_a_chain_of_steps(self, law10):
        ds = s.synth_dataset(1, 3, 0)
        sc = s.ScalingConfig((10, 16), (0.5, 0.75))
        rates = s.rates_two_layer(10, 16, 0.5, 0.75)
        tc = s.TrainConfig(sc, rates, n_steps=5, record_stride=1, seed=2)
        tr = s.train(tc, ds, law10)
        th = s.init_params(sc, law10, 2)
        for _ in range(5):
            th = s.sgd_step_two_layer(sc, rates, th, ds.X[0], float(ds.y[0]))
        for (_, xa), (_, xb) in zip(tr.theta.groups(), th.groups()):
            assert np.array_equal(xa, xb)

    def test_full_batch_step_averages_the_per_sample_forcings(self, dataset3, law10):
        sc = s.ScalingConfig((10, 16), (0.5, 0.75))
        rates = s.rates_two_layer(10, 16, 0.5, 0.75)
        tc = s.TrainConfig(sc, rates, n_steps=1, batch=3, sampling="epoch_shuffle",
                           record_stride=1, seed=2)
        tr = s.train(tc, dataset3, law10)
        th0 = s.init_params(sc, law10, 2)
        deltas = []
        for k in range(3):
            thk = s.sgd_step_two_layer(sc, rates, th0, dataset3.X[k], float(dataset3.y[k]))
            deltas.append({name: arr - dict(th0.groups())[name] for name, arr in thk.groups()})
        for name, arr in tr.theta.groups():
            want = dict(th0.groups())[name] + sum(d[name] for d in deltas) / 3.0
            assert rel_gap(arr, want) < 1e-14

    def test_mean_field_training_reduces_the_residual(self, law10):
        ds = s.synth_dataset(1, 3, 0)
        sc = s.ScalingConfig((10, 256), (1.0, 1.0))
        rates = s.rates_two_layer(10, 256, 1.0, 1.0)
        tc = s.TrainConfig(sc, rates, horizon=2.0, record_stride=64, seed=0)
        res = s.mc_ensemble(tc, ds, law10, 32,
                            statistic=lambda tr: np.abs(ds.y[0] - tr.h[:, 0]),
                            base_seed=100, threads=8)
        assert np.all(np.diff(res.mean) < 0.0)

    def test_max_parameter_stays_flat_as_the_top_width_grows(self, dataset3, law10):
        maxima = []
        for n2 in (100, 400, 1600):
            sc = s.ScalingConfig((10, n2), (1.0, 1.0))
            rates = s.rates_two_layer(10, n2, 1.0, 1.0)
            tc = s.TrainConfig(sc, rates, horizon=1.0,
                               record_stride=max(1, n2 // 64), seed=11)
            tr = s.train(tc, dataset3, law10)
            maxima.append(max(tr.max_abs[g].max() for g in ("C", "W1", "W2")))
        assert (max(maxima) - min(maxima)) / min(maxima) < 0.10

    def test_bound_violation_names_the_group_and_step(self, dataset3, law10):
        sc = s.ScalingConfig((10, 16), (0.5, 0.75))
        rates = s.rates_two_layer(10, 16, 0.5, 0.75)
        tc = s.TrainConfig(sc, rates, n_steps=4, record_stride=1, seed=0, param_bound=0.5)
        with pytest.raises(s.DomainError, match="parameter group C exceeded bound 0.5 at step 0"):
            s.train(tc, dataset3, law10)

    def test_divergence_names_the_group(self, dataset3, law10):
        sc = s.ScalingConfig((10, 16), (0.5, 0.75))
        rates = s.rates_two_layer(10, 16, 0.5, 0.75, 1e160, 1.0, 1.0)
        tc = s.TrainConfig(sc, rates, n_steps=8, record_stride=1, seed=0,
                           param_bound=float("inf"))
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(s.DomainError, match=r"diverged \(non-finite\) at step"):
                s.train(tc, dataset3, law10)

    def test_oversized_batch_rejected(self, dataset3, law10):
        sc = s.ScalingConfig((10, 16), (0.5, 0.75))
        rates = s.rates_two_layer(10, 16, 0.5, 0.75)
        tc = s.TrainConfig(sc, rates, n_steps=1, batch=4, record_stride=1)
        with pytest.raises(s.DomainError, match="batch 4 exceeds dataset size 3"):
            s.train(tc, dataset3, law10)

    def test_config_validation_messages(self, dataset3):
        sc = s.ScalingConfig((10, 16), (0.5, 0.75))
        rates = s.rates_two_layer(10, 16, 0.5, 0.75)
        with pytest.raises(s.DomainError, match="unknown loss"):
            s.TrainConfig(sc, rates, n_steps=1, loss="absolute")
        with pytest.raises(s.DomainError, match="unknown sampling mode"):
            s.TrainConfig(sc, rates, n_steps=1, sampling="sorted")
        with pytest.raises(s.DomainError, match="horizon must be positive"):
            s.TrainConfig(sc, rates, horizon=0.0)
        with pytest.raises(s.DomainError, match="batch must be >= 1"):
            s.TrainConfig(sc, rates, n_steps=1, batch=0)
        with pytest.raises(s.DomainError, match="record_stride must be >= 1"):
            s.TrainConfig(sc, rates, n_steps=1, record_stride=0)
        with pytest.raises(s.DomainError, match="cross-entropy needs n_classes"):
            s.TrainConfig(sc, rates, n_steps=1, loss="cross-entropy")

    def test_function_recording_needs_a_scalar_two_layer_network(self):
        sc3 = s.ScalingConfig((2, 3, 4), (0.5, 0.5, 0.5))
        r3 = s.rates_three_layer(2, 3, 4, 0.5, 0.5, 0.5)
        sp = kk.FunctionSpace(np.zeros((1, 3)), 2, 0.5)
        f = (("c", sp.coord_c()),)
        with pytest.raises(s.DomainError, match="needs a depth-2 scalar network"):
            s.TrainConfig(sc3, r3, n_steps=1, test_functions=f)

    def test_function_averages_track_the_particle_population(self, dataset3, law10):
        sc = s.ScalingConfig((10, 16), (0.5, 0.75))
        rates = s.rates_two_layer(10, 16, 0.5, 0.75)
        sp = kk.FunctionSpace(dataset3.X, 10, 0.5)
        f = sp.prod([sp.coord_c(), sp.coord_w2(0)])
        tc = s.TrainConfig(sc, rates, n_steps=2, record_stride=1, seed=5,
                           test_functions=(("cw", f),))
        tr = s.train(tc, dataset3, law10)
        assert tr.tf_names == ("cw",)
        assert tr.tf_values.shape == (3, 1)
        th0 = s.init_params(sc, law10, 5)
        batch = kk.ParticleBatch(th0.C, th0.inner[0].T, th0.W1)
        want = float(np.mean(f.eval_batch(batch)))
        assert tr.tf_values[0, 0] == pytest.approx(want, abs=1e-15)


class TestTrajectorySerialization:
    def test_csv_round_trip(self, dataset3, law10, tmp_path):
        sc = s.ScalingConfig((10, 16), (0.5, 0.75))
        rates = s.rates_two_layer(10, 16, 0.5, 0.75)
        sp = kk.FunctionSpace(dataset3.X, 10, 0.5)
        tc = s.TrainConfig(sc, rates, n_steps=4, record_stride=2, seed=1,
                           test_functions=(("c", sp.coord_c()),))
        tr = s.train(tc, dataset3, law10)
        path = str(tmp_path / "run.csv")
        tr.to_csv(path)
        header = open(path).readline().strip()
        assert header == "t,h_1,h_2,h_3,max_abs_C,max_abs_W1,max_abs_W2,f_c"
        back = s.Trajectory.from_csv(path)
        assert np.array_equal(back.times, tr.times)
        assert np.array_equal(back.h, tr.h)
        for g in tr.max_abs:
            assert np.array_equal(back.max_abs[g], tr.max_abs[g])
        assert back.tf_names == ("c",)
        assert np.array_equal(back.tf_values, tr.tf_values)
        assert back.theta is None

    def test_malformed_header_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("time,h_1\n0.0,1.0\n")
        with pytest.raises(s.DomainError, match="malformed trajectory header"):
            s.Trajectory.from_csv(str(bad))


class TestDecomposition:
    def test_zero_residual_gives_zero_change(self, dataset3):
        n1, n2 = 4, 64
        sc = s.ScalingConfig((n1, n2), (0.75, 0.8))
        rates = s.rates_two_layer(n1, n2, 0.75, 0.8)
        law = s.InitLaw.default(n1, 3, 0)
        th = s.init_params(sc, law, 3)
        x_k = dataset3.X[1]
        y_k = float(s.forward(sc, th, x_k).g)
        out = s.one_step_decomposition_check(sc, rates, th, dataset3.X[0], x_k, y_k)
        assert out["residual"] == 0.0
        assert out["actual"] == 0.0
        assert out["predicted"] == 0.0

    def test_prediction_tracks_the_actual_change(self, dataset3):
        # kernel prediction error is second order in the one-step increments
        n1 = 4
        rng = np.random.default_rng(0)
        for n2 in (64, 256):
            sc = s.ScalingConfig((n1, n2), (0.75, 0.8))
            rates = s.rates_two_layer(n1, n2, 0.75, 0.8)
            law = s.InitLaw.default(n1, 3, 0)
            th = s.init_params(sc, law, int(rng.integers(0, 100)))
            out = s.one_step_decomposition_check(
                sc, rates, th, dataset3.X[0], dataset3.X[1], float(dataset3.y[1]))
            assert out["error"] == pytest.approx(out["actual"] - out["predicted"], abs=1e-18)
            assert abs(out["error"]) < 0.05 * max(abs(out["actual"]), 1e-12)
