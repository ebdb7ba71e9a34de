"""Receding-horizon planner: assembly, replanning, snapshots, interpolation."""

from dataclasses import replace

import numpy as np
import pytest

from wbmpc.gaits import stand_pattern, trot_pattern, walk_pattern
from wbmpc.gaits import window as schedule_window
from wbmpc.model import (
    NJ, NU, NX,
    DOUBLE_STANCE,
    default_model, lumped_mass_variant, nominal_stance,
)
from wbmpc.dynamics import chain_of, flow_masked, foot_kinematics, \
    mode_mask, recover_torques
from wbmpc.mpc import (
    ConstraintSet, CostWeights, MpcController, MpcError,
    build_problem, controller_from_config, default_barrier, default_weights,
    interpolate_plan, lqr_terminal_weight, make_grid, mpc_settings,
    plan_cone_margins, plan_torques,
)
from wbmpc.ocp import SolverSettings, solve_ocp
from wbmpc.references import Command


@pytest.fixture(scope="module")
def model():
    return default_model()


@pytest.fixture(scope="module")
def x_eq(model):
    return nominal_stance(model)


def static_input(model):
    u = np.zeros(NU)
    u[NJ + 1] = u[NJ + 3] = 0.5 * model.total_mass * (-model.gravity[1])
    return u


@pytest.fixture(scope="module")
def stand(model, x_eq):
    """Standing controller plus its equilibrium replan, shared read-only."""
    ctrl = MpcController(model, horizon=1.0, terminal="heuristic")
    snap = ctrl.replan(x_eq, 0.0)
    return ctrl, snap


@pytest.fixture(scope="module")
def trot_loop(model, x_eq):
    """Warm-started replans every 70 ms while rolling the state along the
    published plan; spans 1.05 s = 1.5 trot cycles."""
    ctrl = MpcController(model, horizon=1.0, terminal="heuristic",
                         pattern=trot_pattern())
    x = x_eq.copy()
    snaps = []
    for k in range(16):
        snaps.append(ctrl.replan(x, 0.07 * k))
        x, _, _ = interpolate_plan(model, snaps[-1], 0.07 * (k + 1))
    return snaps


# ---------------------------------------------------------------------------
# weights, barrier, grid


def test_default_weights_diagonals():
    w = default_weights()
    np.testing.assert_allclose(
        np.diag(w.Q),
        [1000.0, 1000.0, 800.0] + [50.0] * 4 + [10.0, 10.0, 5.0] + [1.0] * 4)
    np.testing.assert_allclose(np.diag(w.R), [1e-3] * 4 + [1e-6] * 4)
    np.testing.assert_allclose(np.diag(w.W),
                               [200.0, 200.0, 10.0, 10.0, 1e-3, 1e-3])
    assert w.rho == 1.0


def test_cost_weights_validation():
    w = default_weights()
    bad_q = np.eye(NX)
    bad_q[0, 1] = 0.5                       # asymmetric
    with pytest.raises(MpcError):
        CostWeights(bad_q, w.R, w.W)
    with pytest.raises(MpcError):
        CostWeights(w.Q, np.zeros((NU, NU)), w.W)     # R not PD
    with pytest.raises(MpcError):
        CostWeights(w.Q, w.R, w.W, rho=0.0)


def test_default_barrier_row_layout():
    b = default_barrier()
    assert b.mu.shape == (28,) and b.delta.shape == (28,)
    np.testing.assert_allclose(b.mu, 1e-2)
    np.testing.assert_allclose(b.delta[:24], 1e-3)
    np.testing.assert_allclose(b.delta[24:], 5e-3)    # cone rows, wider


def test_make_grid_aligns_mode_transitions(model):
    win = schedule_window(walk_pattern(), 0.1, 1.0, 0.0)
    grid = make_grid(win, target_dt=0.015)
    assert grid.t_nodes[0] == pytest.approx(0.1, abs=1e-12)
    assert grid.t_nodes[-1] == pytest.approx(1.1, abs=1e-12)
    assert (grid.dts > 0).all() and grid.dts.max() <= 0.015 + 1e-12
    for (a, b, mode) in win.segments:
        assert np.any(np.abs(grid.t_nodes - a) < 1e-12)
        assert np.any(np.abs(grid.t_nodes - b) < 1e-12)
    mids = 0.5 * (grid.t_nodes[:-1] + grid.t_nodes[1:])
    for i, t in enumerate(mids):
        assert grid.modes[i] == win.mode_at(float(t))


def test_solver_budget_defaults():
    s = mpc_settings()
    assert s.max_iters == 10
    assert s.backend == "riccati"


# ---------------------------------------------------------------------------
# problem assembly


def test_stage_cost_zero_at_reference(model, stand):
    ctrl, _ = stand
    prob, _, _ = ctrl.assemble(nominal_stance(model), 0.0)
    sh = prob.shooting
    r, e, g = sh.stage(prob.refs.x_ref[:sh.N], prob.refs.u_ref)
    assert np.abs(r).max() < 1e-12
    assert np.abs(e * sh.eq_mask).max() < 1e-12
    assert g.min() > 0.5                     # all margins comfortably open
    rT = sh.terminal(prob.refs.x_ref[-1])
    assert np.abs(rT).max() == 0.0


def test_cone_rows_feasible_then_violated(model, stand, x_eq):
    ctrl, _ = stand
    prob, _, _ = ctrl.assemble(x_eq, 0.0)
    sh = prob.shooting
    u = prob.refs.u_ref.copy()

    u[:, NJ:] = [3.0, 10.0, 3.0, 10.0]       # (tangential, normal) per foot
    _, _, g = sh.stage(prob.refs.x_ref[:sh.N], u)
    cone = g[:, 24:]
    assert cone.min() == pytest.approx(3.0, abs=1e-12)   # margin 0.6*10 - |3|
    assert (g > 0).all()                                 # feasible

    u[:, NJ:] = [7.0, 10.0, 7.0, 10.0]
    _, _, g = sh.stage(prob.refs.x_ref[:sh.N], u)
    cone = g[:, 24:]
    assert cone.min() == pytest.approx(-1.0, abs=1e-12)  # 0.6*10 - |7|
    assert (cone < 0).any()                              # barrier active


def test_build_problem_rejects_mismatched_references(model, stand, x_eq):
    ctrl, snap = stand
    other = schedule_window(stand_pattern(), 0.25, 1.0, 0.0)
    with pytest.raises(MpcError):
        build_problem(model, other, snap.refs, default_weights(),
                      ConstraintSet(), "heuristic", x_eq)
    with pytest.raises(MpcError):
        build_problem(model, snap.window, snap.refs, default_weights(),
                      ConstraintSet(), "bogus", x_eq)


def test_controller_constructor_validation(model):
    with pytest.raises(MpcError):
        MpcController(model, terminal="hzd")          # needs a gait
    with pytest.raises(MpcError):
        MpcController(model, input_interp="cubic")
    with pytest.raises(MpcError):
        MpcController(model, horizon=-1.0)


def test_lqr_terminal_weight_is_spd(model):
    S = lqr_terminal_weight(model, default_weights())
    assert S.shape == (NX, NX)
    np.testing.assert_allclose(S, S.T, atol=1e-8)
    assert np.linalg.eigvalsh(S).min() > 0.0


# ---------------------------------------------------------------------------
# replanning at the standing equilibrium


def test_equilibrium_replan_matches_equilibrium_solve(model, stand, x_eq):
    """A 10-iteration replan from the exact equilibrium must land on the
    fully converged solution of the same problem, and the plan itself has
    to stay pinned to the stance."""
    ctrl, snap = stand
    assert snap.ok and snap.status == "converged_kkt"
    assert snap.iterations <= 10
    assert snap.feas_inf < 1e-6

    prob, X0, U0 = ctrl.assemble(x_eq, 0.0)
    tight = SolverSettings(max_iters=200, backend="riccati",
                           tol_step=1e-12, tol_kkt=1e-10, tol_feas=1e-10)
    ref_sol = solve_ocp(prob.shooting, X0, U0, tight)
    assert ref_sol.status.startswith("converged")
    assert np.abs(snap.U - ref_sol.U).max() < 1e-3
    assert np.abs(snap.X - ref_sol.X).max() < 1e-3

    # plan stays a stand: base pose glued to the reference, every state
    # within the barrier boundary layer, first input near the static one
    assert np.abs(snap.X[:, :3] - x_eq[:3]).max() < 1e-4
    assert np.abs(snap.X - x_eq).max() < 1e-2
    assert np.abs(snap.U[0] - static_input(model)).max() < 1e-2


def test_identical_consecutive_replans_are_identical(model, x_eq):
    ctrl = MpcController(model, horizon=0.5, terminal="heuristic")
    first = ctrl.replan(x_eq, 0.0)
    second = ctrl.replan(x_eq.copy(), 0.0)
    assert second is first                  # cached, not re-solved

    fresh = MpcController(model, horizon=0.5, terminal="heuristic")
    again = fresh.replan(x_eq, 0.0)
    np.testing.assert_array_equal(again.X, first.X)
    np.testing.assert_array_equal(again.U, first.U)


def test_feedforward_torque_is_gravity_compensation(model, stand, x_eq):
    _, snap = stand
    tau_exp = recover_torques(model, x_eq, static_input(model),
                              DOUBLE_STANCE)
    for t in (0.0, 0.02, 0.5):
        _, _, tau = interpolate_plan(model, snap, t)
        np.testing.assert_allclose(tau, tau_exp, atol=5e-3)


def test_terminal_none_still_stands(model, x_eq):
    ctrl = MpcController(model, horizon=1.0, terminal="none")
    prob, _, _ = ctrl.assemble(x_eq, 0.0)
    assert prob.shooting.n_res_T == 0
    snap = ctrl.replan(x_eq, 0.0)
    assert snap.ok and snap.status == "converged_kkt"
    # without a terminal anchor the last nodes drift along the cheap force
    # directions, but the states still hold the stance
    assert np.abs(snap.X - x_eq).max() < 5e-2


def test_failed_solve_is_published_and_flagged(model, x_eq):
    # a vanishing barrier makes the reference guess already optimal to
    # line-search resolution, which the solver reports as a failure
    ctrl = MpcController(model, horizon=0.5, terminal="heuristic",
                         barrier=default_barrier(mu=1e-6))
    snap = ctrl.replan(x_eq, 0.0)
    assert not snap.ok
    assert ctrl.latest is snap              # still published
    assert MpcController.N_FAIL == 5        # consumer fallback contract


def test_lumped_variant_keeps_equilibrium(model):
    lump = lumped_mass_variant(model)
    assert lump.total_mass == pytest.approx(model.total_mass, abs=1e-9)
    x_eq = nominal_stance(lump)
    f = flow_masked(chain_of(lump), x_eq, static_input(lump),
                    mode_mask(DOUBLE_STANCE))
    assert np.abs(f).max() < 1e-10          # still a static equilibrium
    ctrl = MpcController(lump, horizon=1.0, terminal="heuristic")
    snap = ctrl.replan(x_eq, 0.0)
    assert snap.ok and snap.status == "converged_kkt"
    assert np.abs(snap.X - x_eq).max() < 5e-2


# ---------------------------------------------------------------------------
# trotting: warm starts, plan invariants, push response


def test_trot_replans_stay_healthy(trot_loop):
    assert all(s.ok for s in trot_loop)
    assert all(s.iterations <= 10 for s in trot_loop)
    assert all(s.feas_inf < 1e-6 for s in trot_loop)


def test_warm_start_stability_across_cycles(trot_loop):
    a, b = trot_loop[5], trot_loop[15]      # plans exactly one cycle apart
    assert b.stamp - a.stamp == pytest.approx(0.70, abs=1e-12)
    rel_x = np.linalg.norm(b.X - a.X) / np.linalg.norm(a.X)
    rel_u = np.linalg.norm(b.U - a.U) / np.linalg.norm(a.U)
    assert rel_x < 0.05
    assert rel_u < 0.05


def test_converged_plans_respect_cone_and_torque_limits(model, trot_loop):
    lim = model.limits
    for snap in trot_loop:
        margins = plan_cone_margins(snap, 0.6)
        assert np.nanmin(margins) >= -1e-3
        tau = plan_torques(model, snap)
        assert (tau >= lim.tau_min - 1e-2).all()
        assert (tau <= lim.tau_max + 1e-2).all()


def test_cone_margin_bookkeeping(stand, trot_loop):
    _, snap = stand
    u = snap.U.copy()
    u[0, NJ:] = [3.0, 10.0, 7.0, 10.0]
    doctored = replace(snap, U=u)
    margins = plan_cone_margins(doctored, 0.6)
    assert margins[0, 0] == pytest.approx(3.0, abs=1e-12)
    assert margins[0, 1] == pytest.approx(-1.0, abs=1e-12)
    assert not np.isnan(margins).any()      # stand: both feet loaded

    trot = trot_loop[0]                     # starts left stance
    m0 = plan_cone_margins(trot, 0.6)[0]
    assert not np.isnan(m0[0])
    assert np.isnan(m0[1])                  # swing foot has no cone


def test_push_shifts_planned_touchdown(model, x_eq, trot_loop):
    """Extra forward base velocity moves the planned touchdown forward,
    braking velocity moves it backward."""
    base = trot_loop[0]
    mode0 = base.window.mode_at(0.01)
    swing = 1 if mode0.left else 0
    k_td = int(np.argmin(np.abs(base.t_nodes - 0.35)))

    def planned_foot_x(snap):
        p, _ = foot_kinematics(model, snap.X[k_td], swing)
        return float(p[0])

    dv = 20.0 * 0.1 / model.total_mass      # 20 N for 0.1 s
    shifts = {}
    for sign in (+1.0, -1.0):
        ctrl = MpcController(model, horizon=1.0, terminal="heuristic",
                             pattern=trot_pattern())
        x = x_eq.copy()
        x[7] += sign * dv                   # base forward velocity
        snap = ctrl.replan(x, 0.0)
        assert snap.ok
        shifts[sign] = planned_foot_x(snap) - planned_foot_x(base)
    assert shifts[+1.0] > 0.02
    assert shifts[-1.0] < -0.02


# ---------------------------------------------------------------------------
# plan interpolation


def test_interpolation_exact_at_nodes(model, stand):
    _, snap = stand
    k = 3
    x, u, _ = interpolate_plan(model, snap, float(snap.t_nodes[k]))
    np.testing.assert_array_equal(x, snap.X[k])
    np.testing.assert_array_equal(u, snap.U[k])
    x, u, _ = interpolate_plan(model, snap, snap.t_end)
    np.testing.assert_array_equal(x, snap.X[-1])
    np.testing.assert_array_equal(u, snap.U[-1])    # last interval holds


def test_interpolation_midpoint_average(model, stand):
    _, snap = stand
    k = 4
    t = 0.5 * float(snap.t_nodes[k] + snap.t_nodes[k + 1])
    x, u, _ = interpolate_plan(model, snap, t)
    np.testing.assert_allclose(x, 0.5 * (snap.X[k] + snap.X[k + 1]),
                               atol=1e-12)
    np.testing.assert_allclose(u, 0.5 * (snap.U[k] + snap.U[k + 1]),
                               atol=1e-12)
    held = replace(snap, input_interp="zoh")
    _, u_hold, _ = interpolate_plan(model, held, t)
    np.testing.assert_array_equal(u_hold, snap.U[k])


def test_interpolation_outside_validity_raises(model, stand):
    _, snap = stand
    with pytest.raises(MpcError):
        interpolate_plan(model, snap, snap.stamp - 0.01)
    with pytest.raises(MpcError):
        interpolate_plan(model, snap, snap.t_end + 0.01)


# ---------------------------------------------------------------------------
# configuration round trip


def test_controller_config_round_trip(model, tmp_path):
    ctrl = MpcController(model, horizon=0.5, terminal="heuristic",
                         command=Command(vx=0.2), pattern=trot_pattern(),
                         max_iters=7, input_interp="zoh")
    cfg = ctrl.config_dict()
    assert cfg["schema"] == "controller-config/v1"

    path = tmp_path / "controller.json"
    path.write_text(__import__("json").dumps(cfg))
    twin = controller_from_config(model, path)
    assert twin.horizon == ctrl.horizon
    assert twin.terminal == ctrl.terminal
    assert twin.max_iters == 7
    assert twin.input_interp == "zoh"
    assert twin.pattern.name == "trot"
    assert twin.command.vx == pytest.approx(0.2)
    np.testing.assert_allclose(np.diag(twin.weights.Q),
                               np.diag(ctrl.weights.Q))
    np.testing.assert_allclose(twin.barrier.mu, ctrl.barrier.mu)
    np.testing.assert_allclose(twin.barrier.delta, ctrl.barrier.delta)


def test_controller_config_rejects_unknown_schema(model):
    with pytest.raises(MpcError):
        controller_from_config(model, {"schema": "controller-config/v2"})


def test_default_input_interpolation_is_linear(model, stand):
    ctrl, snap = stand
    assert ctrl.input_interp == "linear"
    assert snap.input_interp == "linear"
