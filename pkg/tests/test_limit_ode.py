"""Limit dynamics and width expansion: closed forms, stepper order, window
classification, the fluctuation ladder, serialization, and finite-width
Monte Carlo agreement with the first-order path functionals."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm

import scalednn as s
from scalednn.limit_ode import path_integral, rk4, rk4_forced, time_grid
from conftest import asymmetric_law


@pytest.fixture(scope="module")
def law4():
    return s.InitLaw.default(4, 3, 0)


@pytest.fixture(scope="module")
def tables4(dataset3, law4):
    tab = s.kernel_B(dataset3.X, law4, 4, 0.5)
    s.assemble_A(tab, dataset3.X)
    return tab


@pytest.fixture(scope="module")
def h4(dataset3, tables4):
    return s.integrate_h(tables4.A, dataset3.y, 1.0, 1e-3)


@pytest.fixture(scope="module")
def exp8(dataset3, law4, tables4):
    return s.expansion_recursion(dataset3, law4, 0.8, 1.0, 1e-2, tables=tables4, seed=0)


def fit_line(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot
    return slope, r2


class TestSteppers:
    def test_time_grid_values(self):
        t = time_grid(1.0, 0.25)
        assert np.allclose(t, [0.0, 0.25, 0.5, 0.75, 1.0], atol=1e-15)

    @pytest.mark.parametrize(
        "T,dt,msg",
        [
            (0.0, 0.1, "need positive T and dt"),
            (1.0, -0.1, "need positive T and dt"),
            (1.0, 0.3, "T must be an integer multiple of dt"),
        ],
    )
    def test_time_grid_errors(self, T, dt, msg):
        with pytest.raises(s.DomainError, match=msg):
            time_grid(T, dt)

    def test_rk4_fourth_order_against_matrix_exponential(self, dataset3, tables4):
        # dh/dt = A(y - h)/M has the closed form (I - e^{-At/M}) y from zero
        A = tables4.A
        y = dataset3.y
        M = y.shape[0]
        errs = []
        for dt in (0.1, 0.05, 0.025):
            t = time_grid(1.0, dt)
            path = rk4(lambda _s, h: (A @ (y - h)) / M, np.zeros(M), t)
            exact = np.stack([(np.eye(M) - expm(-A * tv / M)) @ y for tv in t])
            errs.append(float(np.max(np.abs(path - exact))))
        assert errs[0] / errs[1] > 12.0
        assert errs[1] / errs[2] > 12.0
        assert errs[2] < 1e-9

    def test_rk4_forced_constant_forcing(self):
        # dy/dt = -y + 1 from 0 is 1 - e^{-t}
        t = time_grid(2.0, 1e-3)
        F = np.ones((t.shape[0], 1))
        path = rk4_forced(lambda v: -v, F, np.zeros(1), t)
        assert np.max(np.abs(path[:, 0] - (1.0 - np.exp(-t)))) < 1e-10

    def test_rk4_forced_grid_mismatch(self):
        t = time_grid(1.0, 0.5)
        with pytest.raises(s.DomainError, match="forcing samples must match the time grid"):
            rk4_forced(lambda v: -v, np.ones((2, 1)), np.zeros(1), t)

    def test_path_integral_exact_on_linear_integrands(self):
        t = time_grid(1.0, 0.01)
        assert np.allclose(path_integral(2.0 * t, t), t**2, atol=1e-12)
        assert path_integral(np.ones_like(t), t) == pytest.approx(t, abs=1e-14)


class TestLimitOde:
    def test_scalar_closed_form(self):
        state = s.integrate_h(np.array([[2.0]]), np.array([1.0]), 1.0, 1e-3)
        assert abs(float(state["h"][-1, 0]) - (1.0 - math.exp(-2.0))) < 1e-8

    def test_fluctuation_decay_closed_form(self):
        h_state = s.integrate_h(np.array([[2.0]]), np.array([1.0]), 1.0, 1e-3)
        k_state = s.integrate_K(h_state, 0.6, ic=np.array([1.0]))
        assert abs(float(k_state["K"][-1, 0]) - math.exp(-2.0)) < 1e-8
        assert k_state.meta["case"] == "decay"

    def test_second_order_decay_closed_form(self):
        h_state = s.integrate_h(np.array([[2.0]]), np.array([1.0]), 1.0, 1e-3)
        k_state = s.integrate_K(h_state, 0.6, ic=np.array([1.0]))
        psi = s.integrate_Psi(h_state, k_state, 0.75, ic=np.array([1.0]))
        assert np.max(np.abs(psi["Psi"][:, 0] - np.exp(-2.0 * psi.t))) < 1e-8
        assert psi.meta["case"] == "decay"

    def test_shape_guard(self, dataset3):
        with pytest.raises(s.DomainError, match="kernel matrix shape inconsistent with targets"):
            s.integrate_h(np.eye(2), dataset3.y, 1.0, 0.1)

    def test_matches_fine_euler(self, dataset3, tables4, h4):
        A = tables4.A
        y = dataset3.y
        M = y.shape[0]
        dt = 1e-6
        stride = 1000
        h = np.zeros(M)
        euler = [h.copy()]
        for k in range(1_000_000):
            h = h + dt * (A @ (y - h)) / M
            if (k + 1) % stride == 0:
                euler.append(h.copy())
        assert np.max(np.abs(h4["h"] - np.stack(euler))) < 1e-8

    def test_residual_norm_strictly_decreases(self, dataset3, h4):
        resid = np.linalg.norm(dataset3.y[None, :] - h4["h"], axis=1)
        assert np.all(np.diff(resid) < 0.0)

    def test_csv_export(self, h4, tmp_path):
        out = tmp_path / "h.csv"
        h4.to_csv(str(out))
        lines = out.read_text().splitlines()
        assert lines[0] == "t,h_1,h_2,h_3"
        data = np.loadtxt(str(out), delimiter=",", skiprows=1)
        assert np.array_equal(data[:, 0], h4.t)
        assert np.array_equal(data[:, 1:], h4["h"])


class TestRegimes:
    @pytest.mark.parametrize(
        "gamma2,nu,boundary,order",
        [
            (0.5, 1, True, 0),
            (0.5000001, 1, False, 1),
            (0.75, 2, True, 1),
            (0.8, 2, False, 2),
            (5.0 / 6.0, 3, True, 2),
            (6.0 / 7.0, 3, False, 3),
            (7.0 / 8.0, 4, True, 3),
            (0.99, 50, True, 49),
        ],
    )
    def test_window_table(self, gamma2, nu, boundary, order):
        info = s.classify_regime(gamma2)
        assert info.nu == nu
        assert info.boundary is boundary
        assert info.network_order == order
        assert info.exponent == min(1.0 - gamma2, gamma2 - 0.5)

    @pytest.mark.parametrize("bad", [0.49, 1.01, -1.0])
    def test_out_of_range(self, bad):
        with pytest.raises(s.DomainError, match=r"gamma2 outside \[1/2, 1\]"):
            s.classify_regime(bad)

    def test_gamma_one_has_no_expansion(self):
        with pytest.raises(s.DomainError, match="gamma2 = 1 admits no width expansion"):
            s.classify_regime(1.0)

    @given(
        nu=st.integers(min_value=1, max_value=50),
        u=st.floats(min_value=1e-6, max_value=1.0 - 1e-6),
    )
    def test_interior_points_classify_into_their_window(self, nu, u):
        left = (2 * nu - 1) / (2 * nu)
        right = (2 * nu + 1) / (2 * nu + 2)
        g = left + u * (right - left)
        info = s.classify_regime(g)
        assert info.nu == nu
        assert not info.boundary
        assert info.network_order == nu
        assert info.exponent == min(1.0 - g, g - 0.5)

    @pytest.mark.parametrize("nu", [1, 2, 3, 4, 5, 6])
    def test_left_edges_are_boundaries(self, nu):
        info = s.classify_regime((2 * nu - 1) / (2 * nu))
        assert info.nu == nu
        assert info.boundary
        assert info.network_order == nu - 1


class TestFluctuationOrders:
    def test_zero_ic_free_decay_stays_zero(self, h4):
        k = s.integrate_K(h4, 0.6, ic="zero")
        assert np.all(k["K"] == 0.0)

    def test_gaussian_ic_needs_inputs(self, h4):
        with pytest.raises(s.DomainError, match="gaussian initial condition needs tables"):
            s.integrate_K(h4, 0.6, ic="auto")

    def test_ic_length_guard(self, h4):
        with pytest.raises(s.DomainError, match="initial condition length differs"):
            s.integrate_K(h4, 0.6, ic=np.ones(5))

    def test_unknown_ic(self, h4):
        with pytest.raises(s.DomainError, match="unknown initial condition 'bogus'"):
            s.integrate_K(h4, 0.6, ic="bogus")

    @pytest.mark.parametrize("bad", [0.49, 1.0])
    def test_first_order_gamma_range(self, h4, bad):
        with pytest.raises(s.DomainError, match=r"gamma2 outside \[1/2, 1\)"):
            s.integrate_K(h4, bad, ic="zero")

    def test_second_order_gamma_range(self, h4):
        k = s.integrate_K(h4, 0.6, ic="zero")
        with pytest.raises(s.DomainError, match=r"needs gamma2 in \[3/4, 1\)"):
            s.integrate_Psi(h4, k, 0.7, ic="zero")

    def test_forced_orders_need_tables_and_law(self, h4, tables4):
        with pytest.raises(s.DomainError, match="forced K needs the kernel tables"):
            s.integrate_K(h4, 0.8, ic="zero")
        with pytest.raises(s.DomainError, match="forced K needs the initialization law"):
            s.integrate_K(h4, 0.8, tables=tables4, ic="zero")
        k = s.integrate_K(h4, 0.8, ic="zero", tables=tables4, law=s.InitLaw.default(4, 3, 0))
        with pytest.raises(s.DomainError, match="forced Psi needs the kernel tables"):
            s.integrate_Psi(h4, k, 0.9, ic="zero")

    def test_symmetric_law_kills_forced_paths(self, dataset3, law4, tables4, h4):
        # sign-symmetric c and w2 laws zero the B1 and B2 first-order paths
        # outright; the B3 paths survive but enter the forcing only against
        # the population B3 bracket, which is zero, so K has no source
        lc = s.integrate_l(tables4.space.coord_c(), h4, tables4, law4)
        assert np.max(np.abs(lc)) < 1e-15
        lb = s.kernel_l_paths(h4, tables4, law4)
        assert np.max(np.abs(lb.B1)) < 1e-15
        assert np.max(np.abs(lb.B2)) < 1e-15
        assert np.max(np.abs(lb.B3)) > 1e-3
        assert np.max(np.abs(tables4.B3)) < 1e-15
        k = s.integrate_K(h4, 0.8, tables=tables4, law=law4, ic="zero", lpaths=lb)
        assert np.max(np.abs(k["K"])) < 1e-15
        assert k.meta["case"] == "forced"

    def test_path_functionals_start_at_zero(self, law4, tables4, h4):
        sp = tables4.space
        f = sp.prod([sp.coord_c(), sp.sig_w(0, 0, sp.points[0])])
        lpath = s.integrate_l(f, h4, tables4, law4)
        assert lpath[0] == 0.0
        assert lpath.shape == h4.t.shape
        k = s.integrate_K(h4, 0.6, ic="zero")
        Lpath = s.integrate_L(f, h4, k, tables4, law4)
        assert Lpath[0] == 0.0

    def test_foreign_function_space_rejected(self, dataset3, law4, tables4, h4):
        other = s.FunctionSpace(dataset3.X, 4, 0.5)
        f = other.coord_c()
        with pytest.raises(s.DomainError, match="test function built on a different function space"):
            s.integrate_l(f, h4, tables4, law4)
        k = s.integrate_K(h4, 0.6, ic="zero")
        with pytest.raises(s.DomainError, match="test function built on a different function space"):
            s.integrate_L(f, h4, k, tables4, law4)


class TestExpansion:
    def test_zeroth_order_is_the_limit(self, dataset3, exp8):
        h = s.integrate_h(exp8.meta["A"], dataset3.y, 1.0, 1e-2)
        assert np.array_equal(exp8.orders[0], h["h"])

    def test_order_count_and_shapes(self, exp8):
        assert exp8.regime.nu == 2 and not exp8.regime.boundary
        assert len(exp8.orders) == exp8.regime.network_order + 1 == 3
        for Q in exp8.orders:
            assert Q.shape == (exp8.t.shape[0], 3)

    def test_meta_payload(self, dataset3, exp8):
        assert set(exp8.meta) >= {"A", "targets", "gram"}
        assert np.allclose(exp8.meta["gram"], dataset3.X @ dataset3.X.T, atol=1e-14)
        assert np.array_equal(exp8.meta["targets"], dataset3.y)

    def test_boundary_window_seeds_the_limit(self, dataset3, law4, tables4):
        state = s.expansion_recursion(
            dataset3, law4, 0.5, 0.2, 1e-2, tables=tables4, seed=42
        )
        assert len(state.orders) == 1
        draw = s.sample_initial_fluctuation(dataset3, law4, 4, 0.5, 42, space=tables4.space)
        assert np.array_equal(state.orders[0][0], draw)

    def test_zero_targets_give_zero_expansion(self, dataset3, law4, tables4):
        ds0 = s.Dataset(dataset3.X, np.zeros(3))
        state = s.expansion_recursion(ds0, law4, 0.8, 0.5, 1e-2, tables=tables4, ic="zero")
        for Q in state.orders:
            assert np.all(Q == 0.0)

    def test_last_order_decays_at_the_kernel_rate(self):
        # interior window: the top order decays freely from its Gaussian
        # draw, so on one point log|Q_last| is a line of slope -A/M
        ds = s.synth_dataset(1, 3, 0)
        law = s.InitLaw.default(4, 3, 7)
        state = s.expansion_recursion(
            ds, law, 0.8, 25.0, 1e-2, n1=4, gamma1=0.5, seed=3, ic="gaussian"
        )
        q_last = state.orders[-1][:, 0]
        assert q_last[0] != 0.0
        mask = state.t >= 10.0
        slope, r2 = fit_line(state.t[mask], np.log(np.abs(q_last[mask])))
        assert r2 > 0.999
        assert slope == pytest.approx(-float(state.meta["A"][0, 0]), rel=0.02)

    @pytest.mark.parametrize("gamma2,window", [(7.0 / 8.0, 4), (0.9, 5)])
    def test_deep_windows_exhaust_derivatives(self, dataset3, law4, tables4, gamma2, window):
        with pytest.raises(
            s.DerivativeOrderError,
            match=f"window {window} needs activation derivatives beyond order 3",
        ):
            s.expansion_recursion(dataset3, law4, gamma2, 0.1, 1e-2, tables=tables4)

    def test_needs_tables_or_dimensions(self, dataset3, law4):
        with pytest.raises(s.DomainError, match=r"need kernel tables or \(n1, gamma1\)"):
            s.expansion_recursion(dataset3, law4, 0.8, 0.1, 1e-2)

    def test_family_paths(self, dataset3, law4, tables4):
        sp = tables4.space
        f = sp.sig_w(0, 0, dataset3.X[0])
        state = s.expansion_recursion(
            dataset3, law4, 0.8, 0.2, 1e-2, tables=tables4,
            f_family=(("fw", f),), family_orders=1,
        )
        fam = state.meta["l_family"]["fw"]
        assert fam.shape == (2, state.t.shape[0])
        mean0 = s.expect(f, law4)
        assert mean0 != 0.0
        assert np.allclose(fam[0], mean0, atol=1e-15)
        h = s.integrate_h(state.meta["A"], dataset3.y, 0.2, 1e-2)
        assert np.allclose(fam[1], s.integrate_l(f, h, tables4, law4), atol=1e-15)

    def test_family_foreign_space(self, dataset3, law4, tables4):
        other = s.FunctionSpace(dataset3.X, 4, 0.5)
        with pytest.raises(s.DomainError, match="family function built on a different function space"):
            s.expansion_recursion(
                dataset3, law4, 0.8, 0.1, 1e-2, tables=tables4,
                f_family=(("f", other.coord_c()),),
            )


class TestReconstruct:
    def test_width_weights(self):
        t = np.linspace(0.0, 1.0, 3)
        orders = [np.full((3, 2), v) for v in (1.0, 2.0, 3.0)]
        state = s.ExpansionState(t, orders, s.classify_regime(0.8), {})
        got = s.reconstruct(state, 16)
        want = 1.0 + 16.0**-0.2 * 2.0 + 16.0**-0.3 * 3.0
        assert np.allclose(got, want, atol=1e-14)

    def test_single_order_is_width_free(self):
        t = np.linspace(0.0, 1.0, 3)
        state = s.ExpansionState(t, [np.full((3, 1), 7.0)], s.classify_regime(0.5), {})
        assert np.array_equal(s.reconstruct(state, 10), s.reconstruct(state, 10_000))

    def test_large_width_approaches_the_limit(self, exp8):
        rec = s.reconstruct(exp8, 10**9)
        gap = np.max(np.abs(rec - exp8.orders[0]))
        bound = (10.0**9) ** -0.2 * np.max(np.abs(exp8.orders[1]))
        bound += (10.0**9) ** -0.3 * np.max(np.abs(exp8.orders[2]))
        assert gap <= bound + 1e-15
        assert gap < 0.05 * np.max(np.abs(exp8.orders[0]))

    def test_regime_required(self, exp8):
        bare = s.ExpansionState(exp8.t, exp8.orders, None, {})
        with pytest.raises(s.DomainError, match="carries no regime information"):
            s.reconstruct(bare, 100)


class TestExpansionSerialization:
    def test_round_trip(self, exp8, tmp_path):
        path = str(tmp_path / "exp.csv")
        exp8.to_csv(path)
        with open(path) as fh:
            assert fh.readline().strip() == "t,order,component_index,value"
        back = s.ExpansionState.from_csv(path, gamma2=0.8)
        assert np.array_equal(back.t, exp8.t)
        assert len(back.orders) == len(exp8.orders)
        for a, b in zip(back.orders, exp8.orders):
            assert np.array_equal(a, b)
        assert back.regime.nu == 2
        bare = s.ExpansionState.from_csv(path)
        assert bare.regime is None

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,order,component,value\n0.0,0,0,1.0\n")
        with pytest.raises(s.DomainError, match="malformed expansion header"):
            s.ExpansionState.from_csv(str(path))

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("t,order,component_index,value\n")
        with pytest.raises(s.DomainError, match="empty expansion file"):
            s.ExpansionState.from_csv(str(path))


@pytest.fixture(scope="module")
def drift_problem():
    ds = s.synth_dataset(1, 3, 0)
    law = asymmetric_law(s.InitLaw.default(4, 3, 5).w1_atoms)
    tables = s.kernel_B(ds.X, law, 4, 0.6)
    A = s.assemble_A(tables, ds.X)
    h_state = s.integrate_h(A, ds.y, 1.0, 1e-3)
    return ds, law, tables, h_state


class TestFiniteWidthAgreement:
    """SGD ensembles of a test-function statistic against the first-order
    path functional: the drift shrinks like N2^{-(1-gamma_2)} and its
    rescaled mean lands on the l path."""

    @staticmethod
    def drift_stat(traj):
        return traj.tf_values[:, 0] - traj.tf_values[0, 0]

    def run_ensemble(self, drift_problem, f, n2, members, base_seed):
        ds, law, _tables, _h = drift_problem
        sc = s.ScalingConfig((4, n2), (0.6, 0.6))
        rates = s.rates_two_layer(4, n2, 0.6, 0.6)
        cfg = s.TrainConfig(
            sc, rates, horizon=1.0, record_stride=n2, test_functions=(("f", f),)
        )
        return s.mc_ensemble(
            cfg, ds, law, members, statistic=self.drift_stat,
            base_seed=base_seed, threads=8,
        )

    def test_drift_shrinks_at_the_width_rate(self, drift_problem):
        ds, law, tables, h_state = drift_problem
        sp = tables.space
        f = sp.prod([sp.coord_c(), sp.coord_w2(0)])
        l_T = float(s.integrate_l(f, h_state, tables, law)[-1])
        assert abs(l_T) > 1e-3
        means = []
        for n2 in (256, 1024):
            res = self.run_ensemble(drift_problem, f, n2, 32, 2000)
            assert abs(res.mean[-1]) > 5.0 * res.se[-1]
            means.append(float(res.mean[-1]))
        ratio = means[1] / means[0]
        theory = 4.0 ** -(1.0 - 0.6)
        assert 0.75 < ratio / theory < 1.25

    def test_rescaled_drift_matches_the_l_path(self, drift_problem):
        ds, law, tables, h_state = drift_problem
        f = tables.space.coord_c()
        l_T = float(s.integrate_l(f, h_state, tables, law)[-1])
        assert l_T > 0.0
        n2 = 4096
        res = self.run_ensemble(drift_problem, f, n2, 24, 3000)
        scale = n2 ** (1.0 - 0.6)
        assert abs(scale * float(res.mean[-1]) - l_T) <= 3.0 * scale * float(res.se[-1])
