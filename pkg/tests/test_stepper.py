import math

import numpy as np
import pytest
import scipy.linalg

from hybrid_dae import netmodel, stepper
from hybrid_dae.algebraizer import (
    BackwardEulerRule,
    ExactLinearEvaluator,
    LinearComponent,
    SurrogateRule,
)
from hybrid_dae.netmodel import Disturbance
from hybrid_dae.stepper import (
    SolverConfig,
    Stepper,
    SystemState,
    equilibrium_state,
    project_algebraic,
    pure_config,
    simulate,
)
from hybrid_dae.util import newton_core

PM_STEP = Disturbance("mechanical-power-step", 2, -0.05, 0.0)


@pytest.fixture(scope="module")
def ieee9_start(ieee9):
    return equilibrium_state(ieee9)


class TestAssemble:
    def test_residual_small_at_step_fixed_point(self, ieee9_start):
        # from an equilibrium, the step solution is the start point itself
        model, state = ieee9_start
        st = Stepper(model, pure_config(h=0.02))
        sys_ = st.assemble(state, st.pack(state.x, state.v))
        assert np.max(np.abs(sys_.F)) < 1e-9

    def test_no_cross_component_state_coupling(self, ieee9_start):
        # block structure: a machine's rows never touch another's states
        model, state = ieee9_start
        st = Stepper(model, pure_config(h=0.02))
        X = st.pack(state.x, state.v)
        X[: st.dim_x] += 0.01  # move off the solution
        sys_ = st.assemble(state, X)
        for a in range(3):
            rows = slice(st.offsets[a], st.offsets[a] + 4)
            for b in range(3):
                if a == b:
                    continue
                cols = slice(st.offsets[b], st.offsets[b] + 4)
                assert np.all(sys_.J[rows, cols] == 0.0)

    @pytest.mark.parametrize("hybrid", [False, True])
    def test_jacobian_matches_fd(self, ieee9_start, rng, hybrid):
        model, state = ieee9_start
        if hybrid:
            from hybrid_dae.algebraizer import NeuralSurrogateEvaluator
            from hybrid_dae.mlp import random_net

            ev = NeuralSurrogateEvaluator(random_net(rng, output_scale=(5.7, 1.2)), clamp=True)
            cfg = stepper.hybrid_config(0.02, {3: ev})
        else:
            cfg = pure_config(0.02)
        st = Stepper(model, cfg)
        X = st.pack(state.x, state.v)
        X += rng.normal(size=len(X)) * 1e-3
        sys_ = st.assemble(state, X)
        eps = 1e-6
        cols = rng.choice(len(X), size=12, replace=False)
        for c in cols:
            up = X.copy(); up[c] += eps
            dn = X.copy(); dn[c] -= eps
            fd = (st.assemble(state, up).F - st.assemble(state, dn).F) / (2 * eps)
            assert np.allclose(sys_.J[:, c], fd, rtol=2e-6, atol=5e-8)


class TestNewton:
    def test_fixed_point_single_iteration(self, ieee9_start):
        model, state = ieee9_start
        st = Stepper(model, pure_config(h=0.02))
        _, iters, _ = st.newton_solve(state)
        assert iters == 1

    def test_scalar_quadratic_same_core(self):
        # x^2 - 4 = 0 from 3.0 through the shared Newton core
        root, iters, _ = newton_core(
            lambda x: (np.array([x[0] ** 2 - 4.0]), np.array([[2.0 * x[0]]])),
            [3.0],
            eps=1e-12,
            k_max=20,
        )
        assert abs(root[0] - 2.0) < 1e-10
        assert iters <= 6

    def test_post_disturbance_iteration_budget(self, ieee9):
        traj = simulate(ieee9, pure_config(h=0.008), 2.0, [PM_STEP])
        assert traj.completed
        assert np.max(traj.newton_iters) <= 10

    def test_update_contraction_near_solution(self, ieee9):
        traj = simulate(ieee9, pure_config(h=0.008), 1.0, [PM_STEP])
        for tail in traj.update_tail:
            if len(tail) == 2:
                assert tail[1] < tail[0]

    def test_max_iterations_reported(self, ieee9_start):
        model, state = ieee9_start
        st = Stepper(model, SolverConfig(h=0.02, epsilon=1e-30, k_max=3))
        from hybrid_dae.util import NewtonError

        with pytest.raises(NewtonError, match="no convergence"):
            st.newton_solve(state)


class TestSimulate:
    def test_equilibrium_hold(self, ieee9):
        traj = simulate(ieee9, pure_config(h=0.02), 10.0)
        assert traj.completed
        for i in (1, 2, 3):
            assert np.max(np.abs(traj.domega(i))) < 1e-8
        v0 = np.abs(traj.v[0])
        assert np.max(np.abs(np.abs(traj.v) - v0[None, :])) < 1e-8

    def test_algebraic_consistency_along_trajectory(self, ieee9):
        from hybrid_dae.algebraizer import MachineComponent
        from hybrid_dae.netmodel import network_residual
        from hybrid_dae.machine import MachineState, network_injection

        traj = simulate(ieee9, pure_config(h=0.01), 1.0, [PM_STEP])
        model = traj.model
        for k in (10, 50, 99):
            inj = []
            for i, spec in enumerate(model.machines):
                s = MachineState.from_array(traj.x[k, 4 * i : 4 * i + 4])
                vb = traj.v[k, spec.bus]
                inj.append(
                    network_injection(spec.params, s, abs(vb), math.atan2(vb.imag, vb.real))
                )
            g = network_residual(model, inj, traj.v[k])
            assert np.max(np.abs(g)) < 1e-7  # 10x epsilon

    def test_determinism(self, ieee9):
        a = simulate(ieee9, pure_config(h=0.01), 1.0, [PM_STEP])
        b = simulate(ieee9, pure_config(h=0.01), 1.0, [PM_STEP])
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.v, b.v)

    def test_disturbance_at_boundary_jumps_algebraics(self, ieee9):
        d = Disturbance("load-admittance-step", 4, 0.3 - 0.1j, 0.5)
        traj = simulate(ieee9, pure_config(h=0.01), 1.0, [d])
        k = 50  # t = 0.5
        v_before = np.abs(traj.v[k - 1, 4])
        v_at = np.abs(traj.v[k, 4])
        assert abs(v_at - v_before) > 1e-4  # visible jump at the event
        assert traj.completed

    def test_classical_internal_voltages_frozen(self, ieee9):
        traj = simulate(ieee9, pure_config(h=0.01), 1.0, [PM_STEP])
        for i in range(3):
            eq_col = traj.x[:, 4 * i]
            ed_col = traj.x[:, 4 * i + 1]
            assert np.all(eq_col == eq_col[0])
            assert np.all(ed_col == ed_col[0])

    def test_trajectory_csv(self, ieee9, tmp_path):
        traj = simulate(ieee9, pure_config(h=0.02), 0.1)
        path = tmp_path / "traj.csv"
        traj.to_csv(path)
        lines = path.read_text().splitlines()
        header = lines[0].split(",")
        assert header[0] == "t"
        assert "delta_1" in header and "domega_3" in header
        assert "V_0" in header and "theta_8" in header
        assert header[-1] == "newton_iters"
        assert len(lines) == 2 + len(traj.t) - 1


class TestProjection:
    def test_projection_zeroes_network_residual(self, ieee9_start, rng):
        from hybrid_dae.machine import MachineState, network_injection
        from hybrid_dae.netmodel import network_residual

        model, state = ieee9_start
        x = state.x.copy()
        x[2] += 0.05   # machine 1 delta
        x[10] += -0.03  # machine 3 delta
        v = project_algebraic(model, x, state.v)
        inj = []
        for i, spec in enumerate(model.machines):
            s = MachineState.from_array(x[4 * i : 4 * i + 4])
            vb = v[spec.bus]
            inj.append(network_injection(spec.params, s, abs(vb), math.atan2(vb.imag, vb.real)))
        g = network_residual(model, inj, v)
        assert np.max(np.abs(g)) < 1e-10


class TestLinearPlugIn:
    """Exact-linear surrogate through the full Newton loop: closed-form match."""

    def _linear_setup(self):
        # stable 2-state oscillator, injection from states, 1-bus resistive net
        a = np.array([[0.0, 1.0], [-9.0, -0.6]])
        b = np.zeros((2, 2))
        c = np.array([[0.4, 0.0], [0.0, 0.3]])
        d = np.array([[-0.2, 0.0], [0.0, -0.2]])
        doc = {
            "frequency_hz": 60.0,
            "buses": [{"id": 0, "kind": "load"}],
            "branches": [],
            "loads": [{"bus": 0, "p": 1.0, "q": 0.4}],
            "machines": [],
        }
        model = netmodel.load_network(doc)
        comp = LinearComponent(a, b, c, d, bus=0)
        return model, comp, a, c, d

    def test_full_newton_loop_reproduces_matrix_exponential(self):
        model, comp, a, c, d = self._linear_setup()
        ev = ExactLinearEvaluator(a, comp.B)
        cfg = SolverConfig(h=0.02, rules={1: SurrogateRule(ev)}, label="exact")
        st = Stepper(model, cfg, components=[comp])
        x0 = np.array([1.0, 0.0])
        # consistent start: solve the linear network for v given x
        y_mat = np.block(
            [[model.ybus.real, -model.ybus.imag], [model.ybus.imag, model.ybus.real]]
        )
        v_vec = np.linalg.solve(y_mat - d, c @ x0)
        state = SystemState(t=0.0, x=x0.copy(), v=np.array([v_vec[0] + 1j * v_vec[1]]))
        phi = scipy.linalg.expm(a * cfg.h)
        x_expect = x0.copy()
        for k in range(100):
            state, _, _ = st.newton_solve(state)
            x_expect = phi @ x_expect
            assert np.max(np.abs(state.x - x_expect)) < 1e-9
            v_expect = np.linalg.solve(y_mat - d, c @ x_expect)
            assert abs(state.v[0] - (v_expect[0] + 1j * v_expect[1])) < 1e-9

    def test_trapezoidal_on_same_system_has_truncation_error(self):
        # sanity: the classical rule is *not* exact on this system
        model, comp, a, c, d = self._linear_setup()
        cfg = SolverConfig(h=0.02, label="trap")
        st = Stepper(model, cfg, components=[comp])
        x0 = np.array([1.0, 0.0])
        y_mat = np.block(
            [[model.ybus.real, -model.ybus.imag], [model.ybus.imag, model.ybus.real]]
        )
        v_vec = np.linalg.solve(y_mat - d, c @ x0)
        state = SystemState(t=0.0, x=x0.copy(), v=np.array([v_vec[0] + 1j * v_vec[1]]))
        state, _, _ = st.newton_solve(state)
        x_true = scipy.linalg.expm(a * cfg.h) @ x0
        err = np.max(np.abs(state.x - x_true))
        assert 1e-9 < err < 1e-4
