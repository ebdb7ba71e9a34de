"""Dynamics oracle tests: symbolic Lagrangian chains, finite differences,
closed-form identities, impulse properties and model-file validation."""

from __future__ import annotations

import json

import numpy as np
import pytest
import sympy as sp

import wbmpc
from wbmpc import dynamics as dyn
from wbmpc.model import (DOUBLE_STANCE, FLIGHT, LEFT_STANCE, RIGHT_STANCE,
                         ContactMode, Input, ModelError, State, default_model,
                         leg_ik, lumped_mass_variant, model_from_dict,
                         nominal_stance)

RNG = np.random.default_rng(42)


def random_state(scale_q=0.5, scale_qd=1.0, rng=RNG):
    x = np.zeros(14)
    x[0:2] = rng.uniform(-1, 1, 2)
    x[1] += 1.0
    x[2] = rng.uniform(-scale_q, scale_q)
    x[3:7] = rng.uniform(-scale_q, scale_q, 4) + [0.5, -1.0, 0.5, -1.0]
    x[7:] = rng.uniform(-scale_qd, scale_qd, 7)
    return x


# --- symbolic Lagrangian oracle for small floating-base chains -------------

def sympy_chain(n_links, masses, lens, coms, izzs, gravity=9.81):
    """Full D(q), h(q,qd) for a floating base plus a serial n-link pendulum,
    derived independently via the Euler-Lagrange equations in sympy."""
    n_q = 3 + n_links
    q = sp.Matrix(sp.symbols(f"q0:{n_q}"))
    qd = sp.Matrix(sp.symbols(f"v0:{n_q}"))
    # absolute angles
    phis = []
    acc = q[2]
    for j in range(n_links):
        acc = acc + q[3 + j]
        phis.append(acc)
    # com positions: chain hangs below the base point
    pts = []
    origin = sp.Matrix([q[0], q[1]])
    for j in range(n_links):
        p = origin.copy()
        for k in range(j):
            p += sp.Matrix([sp.sin(phis[k]), -sp.cos(phis[k])]) * lens[k]
        cx, cz = coms[j]
        rot = sp.Matrix([[sp.cos(phis[j]), -sp.sin(phis[j])],
                         [sp.sin(phis[j]), sp.cos(phis[j])]])
        p += rot @ sp.Matrix([cx, cz])
        pts.append(p)
    T = sp.S(0)
    V = sp.S(0)
    for j in range(n_links):
        vel = pts[j].jacobian(q) @ qd
        omega = sp.Matrix([phis[j]]).jacobian(q) @ qd
        T += masses[j] * (vel.T @ vel)[0] / 2 + izzs[j] * omega[0] ** 2 / 2
        V += masses[j] * gravity * pts[j][1]
    D = sp.hessian(T, qd)
    # h = d/dt(dT/dqd) - dT/dq + dV/dq with qdd = 0
    dT_dqd = sp.Matrix([sp.diff(T, v) for v in qd])
    h = sp.zeros(n_q, 1)
    for i in range(n_q):
        ddt = sum(sp.diff(dT_dqd[i], q[k]) * qd[k] for k in range(n_q))
        h[i] = ddt - sp.diff(T, q[i]) + sp.diff(V, q[i])
    f_D = sp.lambdify((q, qd), D, "numpy")
    f_h = sp.lambdify((q, qd), h, "numpy")
    return f_D, f_h


def numeric_chain(n_links, masses, lens, coms, izzs):
    """Same chain built on the package's kinematic-tree engine."""
    n_q = 3 + n_links
    rows = np.zeros((n_links, n_q))
    for j in range(n_links):
        rows[j, 2] = 1.0
        rows[j, 3:3 + j + 1] = 1.0
    points = []
    for j in range(n_links):
        terms = [(k, (0.0, -lens[k])) for k in range(j)]
        terms.append((j, tuple(coms[j])))
        points.append(dyn.ChainPoint(tuple(terms)))
    feet = (dyn.ChainPoint(tuple([(k, (0.0, -lens[k])) for k in range(n_links)])),)
    return dyn.Chain.build(n_q, rows, points, tuple(range(n_links)),
                           masses, izzs, feet, (0.0, -9.81),
                           tuple(range(3, n_q)))


@pytest.mark.parametrize("n_links", [1, 2])
def test_small_chain_matches_symbolic_lagrangian(n_links):
    masses = [1.3, 0.7][:n_links]
    lens = [0.6, 0.45][:n_links]
    coms = [(0.02, -0.31), (-0.01, -0.2)][:n_links]
    izzs = [0.05, 0.02][:n_links]
    f_D, f_h = sympy_chain(n_links, masses, lens, coms, izzs)
    chain = numeric_chain(n_links, masses, lens, coms, izzs)
    rng = np.random.default_rng(7)
    for _ in range(20):
        q = rng.uniform(-2, 2, 3 + n_links)
        qd = rng.uniform(-3, 3, 3 + n_links)
        D, h, _ = dyn.mass_and_bias(chain, q, qd)
        D_ref = np.asarray(f_D(q, qd), dtype=float)
        h_ref = np.asarray(f_h(q, qd), dtype=float).ravel()
        assert np.allclose(D, D_ref, atol=1e-10)
        assert np.allclose(h, h_ref, atol=1e-10)


def test_one_link_joint_inertia_closed_form():
    # the joint-joint entry of a 1-link chain is I + m*lc^2 regardless of pose
    m, lc, izz = 2.0, 0.35, 0.04
    chain = numeric_chain(1, [m], [0.7], [(0.0, -lc)], [izz])
    rng = np.random.default_rng(3)
    for _ in range(10):
        q = rng.uniform(-2, 2, 4)
        D, _, _ = dyn.mass_and_bias(chain, q, np.zeros(4))
        assert abs(D[3, 3] - (izz + m * lc * lc)) < 1e-12


# --- mass matrix properties -------------------------------------------------

def test_mass_matrix_symmetric_positive_definite():
    model = default_model()
    chain = dyn.chain_of(model)
    rng = np.random.default_rng(0)
    for _ in range(500):
        q = rng.uniform(-np.pi, np.pi, 7)
        D, _, _ = dyn.mass_and_bias(chain, q, np.zeros(7))
        assert np.allclose(D, D.T, atol=1e-12)
        assert np.linalg.eigvalsh(D).min() > 0.0


def test_bias_at_rest_is_gravity_gradient():
    # h(q, 0) equals dV/dq (no velocity products at rest)
    model = default_model()
    chain = dyn.chain_of(model)
    rng = np.random.default_rng(5)
    for _ in range(20):
        q = rng.uniform(-1.5, 1.5, 7)
        _, h, _ = dyn.mass_and_bias(chain, q, np.zeros(7))

        def V(qq):
            kin = dyn.kinematics(chain, qq, np.zeros(7))
            return -sum(m * (chain.gravity @ p)
                        for m, p in zip(chain.masses, kin.com_p))

        eps = 1e-6
        for k in range(7):
            qp, qm = q.copy(), q.copy()
            qp[k] += eps
            qm[k] -= eps
            g_fd = (V(qp) - V(qm)) / (2 * eps)
            assert abs(h[k] - g_fd) < 1e-6


def test_actuation_matrix_zero_base_rows():
    model = default_model()
    terms = dyn.compute_terms(model, nominal_stance(model), DOUBLE_STANCE)
    assert np.all(terms.B[:3] == 0.0)
    assert np.allclose(terms.B[3:], np.eye(4))


# --- constrained dynamics / reparameterized flow ----------------------------

def test_flight_dynamics_is_unconstrained():
    model = default_model()
    x = random_state()
    qdd, lam = dyn.constrained_forward_dynamics(model, x, np.zeros(4), FLIGHT)
    assert lam.size == 0
    terms = dyn.compute_terms(model, x, FLIGHT)
    assert np.allclose(terms.D @ qdd + terms.h, 0.0, atol=1e-9)


def test_constrained_dynamics_satisfies_contact_acceleration():
    model = default_model()
    rng = np.random.default_rng(11)
    for mode in (LEFT_STANCE, RIGHT_STANCE, DOUBLE_STANCE):
        x = random_state(rng=rng)
        tau = rng.uniform(-30, 30, 4)
        qdd, lam = dyn.constrained_forward_dynamics(model, x, tau, mode)
        terms = dyn.compute_terms(model, x, mode)
        # equations of motion
        res = terms.D @ qdd + terms.h - terms.B @ tau - terms.Jc.T @ lam
        assert np.abs(res).max() < 1e-8
        # contact point acceleration zero
        acc = terms.Jc @ qdd + terms.Jc_dot_qd
        assert np.abs(acc).max() < 1e-8


def test_reparam_flow_matches_torque_flow_pointwise():
    model = default_model()
    rng = np.random.default_rng(13)
    for mode in (LEFT_STANCE, RIGHT_STANCE, DOUBLE_STANCE):
        for _ in range(25):
            x = random_state(rng=rng)
            tau = rng.uniform(-40, 40, 4)
            qdd, lam = dyn.constrained_forward_dynamics(model, x, tau, mode)
            u = np.zeros(8)
            u[:4] = qdd[3:]
            for i, f in enumerate(mode.stance_feet):
                u[4 + 2 * f: 6 + 2 * f] = lam[2 * i: 2 * i + 2]
            xdot = dyn.reparam_flow(model, x, u, mode)
            assert np.allclose(xdot[:7], x[7:], atol=1e-12)
            assert np.abs(xdot[7:10] - qdd[:3]).max() < 1e-9
            assert np.allclose(xdot[10:], qdd[3:], atol=1e-12)


def test_flow_integration_agreement_between_forms():
    # integrate the torque-input dynamics and the reparameterized flow with
    # the input converted pointwise; trajectories must coincide
    model = default_model()
    mode = DOUBLE_STANCE
    x0 = nominal_stance(model)
    tau_sig = np.array([5.0, 20.0, 3.0, 17.0])

    def f_torque(xx):
        qdd, _ = dyn.constrained_forward_dynamics(model, xx, tau_sig, mode)
        return np.concatenate([xx[7:], qdd])

    def f_reparam(xx):
        qdd, lam = dyn.constrained_forward_dynamics(model, xx, tau_sig, mode)
        u = np.concatenate([qdd[3:], lam])
        return dyn.reparam_flow(model, xx, u, mode)

    def rk4(f, x, dt):
        k1 = f(x)
        k2 = f(x + dt / 2 * k1)
        k3 = f(x + dt / 2 * k2)
        k4 = f(x + dt * k3)
        return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    xa = x0.copy()
    xb = x0.copy()
    for _ in range(50):
        xa = rk4(f_torque, xa, 0.002)
        xb = rk4(f_reparam, xb, 0.002)
    assert np.abs(xa - xb).max() < 1e-8


def test_recover_torques_roundtrip():
    model = default_model()
    rng = np.random.default_rng(17)
    for mode in (LEFT_STANCE, DOUBLE_STANCE):
        for _ in range(20):
            x = random_state(rng=rng)
            u = rng.uniform(-5, 5, 8)
            for f in mode.swing_feet:
                u[4 + 2 * f: 6 + 2 * f] = 0.0
            tau = dyn.recover_torques(model, x, u, mode)
            xdot = dyn.reparam_flow(model, x, u, mode)
            qdd = xdot[7:]
            terms = dyn.compute_terms(model, x, mode)
            lam_full = u[4:]
            lam = np.concatenate([lam_full[2 * f:2 * f + 2] for f in mode.stance_feet])
            res = terms.D @ qdd + terms.h - terms.B @ tau - terms.Jc.T @ lam
            assert np.abs(res).max() < 1e-8


def test_recover_torques_affine_in_input():
    # tau(x, u) is affine in u: superposition must hold exactly
    model = default_model()
    rng = np.random.default_rng(19)
    x = random_state(rng=rng)
    u1 = rng.uniform(-3, 3, 8)
    u2 = rng.uniform(-3, 3, 8)
    a = 0.37
    t0 = dyn.recover_torques(model, x, np.zeros(8), DOUBLE_STANCE)
    t1 = dyn.recover_torques(model, x, u1, DOUBLE_STANCE)
    t2 = dyn.recover_torques(model, x, u2, DOUBLE_STANCE)
    tmix = dyn.recover_torques(model, x, a * u1 + (1 - a) * u2, DOUBLE_STANCE)
    assert np.allclose(tmix, a * t1 + (1 - a) * t2, atol=1e-10)
    # and the same for the flow
    f0 = dyn.reparam_flow(model, x, np.zeros(8), DOUBLE_STANCE)
    f1 = dyn.reparam_flow(model, x, u1, DOUBLE_STANCE)
    fmix = dyn.reparam_flow(model, x, a * u1, DOUBLE_STANCE)
    assert np.allclose(fmix, a * f1 + (1 - a) * f0, atol=1e-10)


def test_static_double_stance_weight_split():
    model = default_model()
    x = nominal_stance(model)
    u = np.zeros(8)
    u[5] = u[7] = model.total_mass * 9.81 / 2
    assert abs(u[5] - 105.948) < 1e-10
    xdot = dyn.reparam_flow(model, x, u, DOUBLE_STANCE)
    # com-balanced nominal stance: static input produces (almost) no motion
    assert np.abs(xdot).max() < 1e-3


def test_swing_force_rejected():
    model = default_model()
    x = nominal_stance(model)
    u = np.zeros(8)
    u[4] = 1.0  # force on left foot while it swings
    with pytest.raises(dyn.DynamicsError):
        dyn.reparam_flow(model, x, u, RIGHT_STANCE)


def test_nonfinite_state_rejected():
    model = default_model()
    x = nominal_stance(model)
    x[3] = np.nan
    with pytest.raises(dyn.DynamicsError):
        dyn.compute_terms(model, x, DOUBLE_STANCE)


# --- impulse map ------------------------------------------------------------

def test_impulse_map_zeroes_contact_velocity_and_dissipates():
    model = default_model()
    rng = np.random.default_rng(23)
    for _ in range(200):
        x = random_state(rng=rng)
        mode = (LEFT_STANCE, RIGHT_STANCE, DOUBLE_STANCE)[rng.integers(3)]
        x_post, F = dyn.impulse_map(model, x, mode)
        assert np.allclose(x_post[:7], x[:7])
        terms = dyn.compute_terms(model, x_post, mode)
        assert np.abs(terms.Jc @ x_post[7:]).max() < 1e-10
        ke_pre = dyn.kinetic_energy(model, x)
        ke_post = dyn.kinetic_energy(model, x_post)
        assert ke_post <= ke_pre + 1e-12
        # momentum balance: D (qd+ - qd-) = Jc^T F
        res = terms.D @ (x_post[7:] - x[7:]) - terms.Jc.T @ F
        assert np.abs(res).max() < 1e-8


def test_impulse_fixed_point_when_already_consistent():
    model = default_model()
    x = nominal_stance(model)
    x_post, F = dyn.impulse_map(model, x, DOUBLE_STANCE)
    assert np.allclose(x_post, x, atol=1e-12)
    assert np.abs(F).max() < 1e-9


def test_impulse_matches_projection_formula():
    # independent algebra: qd+ = (I - D^-1 J^T (J D^-1 J^T)^-1 J) qd-
    model = default_model()
    rng = np.random.default_rng(29)
    for _ in range(20):
        x = random_state(rng=rng)
        mode = RIGHT_STANCE
        terms = dyn.compute_terms(model, x, mode)
        Dinv = np.linalg.inv(terms.D)
        J = terms.Jc
        G = J @ Dinv @ J.T
        P = np.eye(7) - Dinv @ J.T @ np.linalg.inv(G) @ J
        qd_ref = P @ x[7:]
        x_post, _ = dyn.impulse_map(model, x, mode)
        assert np.abs(x_post[7:] - qd_ref).max() < 1e-9


# --- foot kinematics ---------------------------------------------------------

def test_foot_positions_straight_down():
    model = default_model()
    x = np.zeros(14)
    x[1] = 1.0
    for foot in (0, 1):
        p, v = dyn.foot_kinematics(model, x, foot)
        assert np.allclose(p, [0.0, 1.0 - 0.78], atol=1e-12)
        assert np.allclose(v, 0.0)


def test_foot_velocity_matches_finite_difference():
    model = default_model()
    rng = np.random.default_rng(31)
    x = random_state(rng=rng)
    eps = 1e-7
    for foot in (0, 1):
        p0, v = dyn.foot_kinematics(model, x, foot)
        x2 = x.copy()
        x2[:7] += eps * x[7:]
        p1, _ = dyn.foot_kinematics(model, x2, foot)
        v_fd = (p1 - p0) / eps
        assert np.abs(v - v_fd).max() < 1e-5


def test_foot_acceleration_matches_flow_finite_difference():
    model = default_model()
    rng = np.random.default_rng(37)
    mode = DOUBLE_STANCE
    x = random_state(rng=rng)
    u = rng.uniform(-2, 2, 8)
    p, v, a = dyn.foot_kinematics(model, x, 0, u, mode)
    eps = 1e-6
    xdot = dyn.reparam_flow(model, x, u, mode, strict=False)
    xp = x + eps * xdot
    _, vp = dyn.foot_kinematics(model, xp, 0)
    xm = x - eps * xdot
    _, vm = dyn.foot_kinematics(model, xm, 0)
    a_fd = (vp - vm) / (2 * eps)
    assert np.abs(a - a_fd).max() < 1e-5


def test_nominal_stance_geometry():
    model = default_model()
    x = nominal_stance(model, hip_height=0.68)
    for foot in (0, 1):
        p, _ = dyn.foot_kinematics(model, x, foot)
        assert abs(p[0] - 0.0) < 1e-9
        assert abs(p[1]) < 1e-9
    hip, knee = leg_ik(model, 0.0, -0.68)
    assert knee < 0 < hip  # knee-forward branch


# --- energy ------------------------------------------------------------------

def test_energy_conservation_in_flight():
    model = default_model()
    x = nominal_stance(model)
    x[7] = 0.3
    x[9] = 0.5
    x[10:] = [0.5, -0.4, 0.2, 0.1]

    from scipy.integrate import solve_ivp

    def f(t, xx):
        qdd, _ = dyn.constrained_forward_dynamics(model, xx, np.zeros(4), FLIGHT)
        return np.concatenate([xx[7:], qdd])

    e0 = sum(dyn.mechanical_energy(model, x))
    sol = solve_ivp(f, (0.0, 1.0), x, rtol=1e-11, atol=1e-11, dense_output=False)
    assert sol.success
    e1 = sum(dyn.mechanical_energy(model, sol.y[:, -1]))
    assert abs(e1 - e0) / abs(e0) < 1e-6


def test_power_balance_along_constrained_motion():
    # d/dt (T + V) equals the actuation power qd . (B tau + Jc^T lam)
    model = default_model()
    x = nominal_stance(model)
    x[7:] = 0.1 * np.arange(7) - 0.3
    x_proj, _ = dyn.impulse_map(model, x, LEFT_STANCE)
    x = x_proj
    tau = np.array([3.0, -8.0, 5.0, 12.0])
    qdd, lam = dyn.constrained_forward_dynamics(model, x, tau, LEFT_STANCE)
    terms = dyn.compute_terms(model, x, LEFT_STANCE)
    power = x[7:] @ (terms.B @ tau + terms.Jc.T @ lam)
    eps = 1e-6

    def total_energy(xx):
        return sum(dyn.mechanical_energy(model, xx))

    xdot = np.concatenate([x[7:], qdd])
    e_dot_fd = (total_energy(x + eps * xdot) - total_energy(x - eps * xdot)) / (2 * eps)
    assert abs(e_dot_fd - power) < 1e-5 * max(1.0, abs(power))


# --- derivatives -------------------------------------------------------------

def test_flow_jacobians_match_finite_differences():
    model = default_model()
    rng = np.random.default_rng(41)
    worst = 0.0
    for _ in range(100):
        x = random_state(rng=rng)
        u = rng.uniform(-10, 10, 8)
        mode = (LEFT_STANCE, RIGHT_STANCE, DOUBLE_STANCE)[rng.integers(3)]
        fx, fu = dyn.flow_jacobians(model, x, u, mode)
        eps = 1e-6
        scale = 1.0
        for k in range(14):
            xp, xm = x.copy(), x.copy()
            xp[k] += eps
            xm[k] -= eps
            col = (dyn.reparam_flow(model, xp, u, mode, strict=False)
                   - dyn.reparam_flow(model, xm, u, mode, strict=False)) / (2 * eps)
            scale = max(scale, np.abs(col).max())
            worst = max(worst, np.abs(fx[:, k] - col).max())
        for k in range(8):
            up, um = u.copy(), u.copy()
            up[k] += eps
            um[k] -= eps
            col = (dyn.reparam_flow(model, x, up, mode, strict=False)
                   - dyn.reparam_flow(model, x, um, mode, strict=False)) / (2 * eps)
            worst = max(worst, np.abs(fu[:, k] - col).max())
        assert worst / scale < 1e-5


# --- model loading and containers -------------------------------------------

def test_default_model_invariants():
    model = default_model()
    assert abs(model.total_mass - 21.6) < 1e-9
    assert 0.38 <= model.leg_mass_fraction <= 0.42
    assert np.all(model.limits.q_min < model.limits.q_max)
    assert np.all(model.limits.tau_min < 0)
    assert np.all(model.limits.tau_max > 0)
    assert model.thigh_length == 0.4
    assert model.calf_length == 0.38


def _default_dict():
    with open(wbmpc.default_model_path()) as f:
        return json.load(f)


def test_loader_rejects_unknown_fields():
    data = _default_dict()
    data["unexpected"] = 1
    with pytest.raises(ModelError):
        model_from_dict(data)


def test_loader_rejects_wrong_schema():
    data = _default_dict()
    data["schema"] = "robot-model/v2"
    with pytest.raises(ModelError):
        model_from_dict(data)


def test_loader_rejects_nonpositive_mass():
    data = _default_dict()
    data["links"][1]["mass"] = 0.0
    with pytest.raises(ModelError):
        model_from_dict(data)


def test_loader_rejects_inverted_limits():
    data = _default_dict()
    data["limits"]["q_min"][0] = data["limits"]["q_max"][0] + 1.0
    with pytest.raises(ModelError):
        model_from_dict(data)


def test_lumped_variant_preserves_mass_and_geometry():
    model = default_model()
    lumped = lumped_mass_variant(model)
    assert abs(lumped.total_mass - model.total_mass) < 1e-9
    assert lumped.leg_mass_fraction < 0.01
    assert lumped.thigh_length == model.thigh_length
    # dynamics still well posed
    x = nominal_stance(lumped)
    qdd, lam = dyn.constrained_forward_dynamics(lumped, x, np.zeros(4), DOUBLE_STANCE)
    assert np.all(np.isfinite(qdd)) and np.all(np.isfinite(lam))


def test_state_input_containers():
    s = State.from_vector(np.arange(14.0))
    assert np.allclose(s.vector, np.arange(14.0))
    with pytest.raises(ValueError):
        State.from_vector(np.zeros(13))
    u = Input.from_vector(np.arange(8.0))
    assert np.allclose(u.vector, np.arange(8.0))
    with pytest.raises(ValueError):
        Input.from_vector(np.zeros(9))


def test_contact_mode_ids():
    for mid in range(4):
        assert ContactMode.from_id(mid).mode_id == mid
    assert ContactMode(True, False).stance_feet == (0,)
    assert ContactMode(True, False).swing_feet == (1,)
    with pytest.raises(ValueError):
        ContactMode.from_id(7)
