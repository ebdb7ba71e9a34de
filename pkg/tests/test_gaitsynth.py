"""Gait synthesis: transcription gates, encoding, playback, plant replay."""

import json

import numpy as np
import pytest

from wbmpc.dynamics import chain_of, constrained_forward_dynamics, impulse_map
from wbmpc.model import (
    DOUBLE_STANCE, LEFT_STANCE, NJ, NQ, NU, NX,
    default_model,
)
from wbmpc.ocp import SolverSettings
from wbmpc.plant import Plant, PlantError, SimConfig
from wbmpc.references import (
    bezier_eval, bernstein_basis, load_gait, relabel_input, relabel_mode,
    relabel_state, save_gait,
)
from wbmpc.gaitsynth import (
    DEFECT_TOL, GUARD_TOL, RESIDUAL_TOL, SPEED_TOL,
    GaitPlayback, GaitSynthError, GaitSynthesisProblem, ZeroDynamicsResidual,
    _impulse, builtin_gait, fit_bezier, relabel_matrix, replay_gait,
    synthesize, validate_gait,
)


@pytest.fixture(scope="module")
def model():
    return default_model()


@pytest.fixture(scope="module")
def trot():
    return builtin_gait("trot")


@pytest.fixture(scope="module")
def walk():
    return builtin_gait("walk")


@pytest.fixture(scope="module")
def small_trot(model):
    # coarsest grid the problem accepts; keeps the in-test solve cheap
    return synthesize(model, GaitSynthesisProblem.trot(intervals=10))


# ---------------------------------------------------------------------------
# Bezier fitting


def test_fit_bezier_recovers_exact_polynomial():
    rng = np.random.default_rng(7)
    alpha = rng.normal(size=6)
    s = np.linspace(0.0, 1.0, 31)
    y = bezier_eval(alpha, s)
    fitted, err = fit_bezier(s, y, degree=5)
    np.testing.assert_allclose(fitted, alpha, atol=1e-10)
    assert err < 1e-10


def test_fit_bezier_constant_samples_give_constant_coefficients():
    s = np.linspace(0.0, 1.0, 12)
    alpha, err = fit_bezier(s, np.full(12, 0.37), degree=4)
    np.testing.assert_allclose(alpha, 0.37, atol=1e-12)
    assert err < 1e-12


def test_fit_bezier_residual_matches_normal_equations():
    # degree-8 data fitted at degree 5: the reported residual must equal
    # the one from solving the pinned least-squares system directly
    rng = np.random.default_rng(21)
    alpha8 = rng.normal(size=9)
    s = np.linspace(0.0, 1.0, 41)
    y = bezier_eval(alpha8, s)
    fitted, err = fit_bezier(s, y, degree=5)

    basis = bernstein_basis(5, s)
    rhs = y - basis[:, 0] * y[0] - basis[:, 5] * y[-1]
    interior, *_ = np.linalg.lstsq(basis[:, 1:5], rhs, rcond=None)
    oracle = np.concatenate([[y[0]], interior, [y[-1]]])
    np.testing.assert_allclose(fitted, oracle, atol=1e-9)
    assert err == pytest.approx(
        float(np.max(np.abs(basis @ oracle - y))), rel=1e-9)
    assert err > 1e-6                      # genuinely lossy fit


def test_fit_bezier_pins_endpoint_derivatives():
    rng = np.random.default_rng(3)
    s = np.linspace(0.0, 1.0, 25)
    y = np.sin(2.1 * s) + 0.1 * rng.normal(size=25)
    alpha, _ = fit_bezier(s, y, degree=6, end_derivatives=(0.8, -0.4))
    d1 = bernstein_basis(6, np.array([0.0, 1.0]), order=1)
    slopes = d1 @ alpha
    assert slopes[0] == pytest.approx(0.8, abs=1e-9)
    assert slopes[1] == pytest.approx(-0.4, abs=1e-9)
    assert alpha[0] == pytest.approx(y[0], abs=1e-12)
    assert alpha[-1] == pytest.approx(y[-1], abs=1e-12)


def test_fit_bezier_rejects_bad_samples():
    s = np.linspace(0.0, 1.0, 4)
    with pytest.raises(GaitSynthError, match="at least"):
        fit_bezier(s, np.zeros(4), degree=5)
    with pytest.raises(GaitSynthError, match="matching"):
        fit_bezier(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(GaitSynthError, match=r"\[0, 1\]"):
        fit_bezier(np.linspace(-0.5, 0.5, 9), np.zeros(9))


def test_fit_bezier_rejects_degenerate_phase_grid():
    # every interior sample at the same phase: the interior columns of
    # the Bernstein basis collapse to rank one
    s = np.array([0.0] + [0.5] * 7 + [1.0])
    with pytest.raises(GaitSynthError, match="rank"):
        fit_bezier(s, np.sin(s), degree=5)


# ---------------------------------------------------------------------------
# leg relabeling and the touchdown reset


def test_relabel_matrix_is_a_permutation_involution():
    r = relabel_matrix()
    assert r.shape == (NX, NX)
    np.testing.assert_array_equal(r @ r, np.eye(NX))
    assert ((r == 0) | (r == 1)).all()
    np.testing.assert_array_equal(r.sum(axis=0), np.ones(NX))
    rng = np.random.default_rng(11)
    x = rng.normal(size=NX)
    np.testing.assert_allclose(r @ x, relabel_state(x), atol=1e-14)


def test_impulse_matches_plant_grade_reset(model, trot):
    chain = chain_of(model)
    x = trot.x_samples[-1]
    for feet, mode in [((0,), LEFT_STANCE), ((0, 1), DOUBLE_STANCE)]:
        x_post, imp = _impulse(chain, x, list(feet))
        x_ref, imp_ref = impulse_map(model, x, mode)
        np.testing.assert_allclose(x_post, x_ref, atol=1e-10)
        np.testing.assert_allclose(imp, imp_ref, atol=1e-10)


def test_impulse_batches_consistently(model, trot, walk):
    chain = chain_of(model)
    xs = np.stack([trot.x_samples[-1], walk.x_samples[-1]])
    post, imp = _impulse(chain, xs, [0, 1])
    for k in range(2):
        p1, i1 = _impulse(chain, xs[k], [0, 1])
        np.testing.assert_allclose(post[k], p1, atol=1e-12)
        np.testing.assert_allclose(imp[k], i1, atol=1e-12)


# ---------------------------------------------------------------------------
# problem validation


def test_problem_presets_have_expected_shape():
    trot_p = GaitSynthesisProblem.trot()
    assert trot_p.mode_sequence == ((LEFT_STANCE, 0.35),)
    assert trot_p.step_duration == pytest.approx(0.35)
    assert trot_p.displacement == 0.0

    walk_p = GaitSynthesisProblem.walk(0.5)
    assert walk_p.mode_sequence[0] == (DOUBLE_STANCE, 0.05)
    assert walk_p.mode_sequence[1] == (LEFT_STANCE, 0.35)
    assert walk_p.step_duration == pytest.approx(0.40)
    assert walk_p.displacement == pytest.approx(0.20)
    assert walk_p.touchdown_speed == pytest.approx(0.25)


@pytest.mark.parametrize("kwargs, match", [
    (dict(mode_sequence=()), "empty"),
    (dict(nodes_per_mode=(10, 10)), "one node count"),
    (dict(nodes_per_mode=(6,)), "at least 10"),
    (dict(mode_sequence=((LEFT_STANCE, -0.1),)), "positive"),
    (dict(target_velocity=float("nan")), "finite"),
    (dict(w_swing=-1.0), "nonnegative"),
    (dict(swing_apex=0.9), "apex"),
    (dict(friction_mu=-0.2), "positive"),
    (dict(touchdown_speed=-0.1), "nonnegative"),
    (dict(bezier_degree=2), "degree"),
])
def test_problem_rejects_bad_fields(kwargs, match):
    base = dict(name="trot", target_velocity=0.0,
                mode_sequence=((LEFT_STANCE, 0.35),), nodes_per_mode=(12,))
    base.update(kwargs)
    with pytest.raises(GaitSynthError, match=match):
        GaitSynthesisProblem(**base)


def test_problem_from_dict_families_and_overrides():
    p = GaitSynthesisProblem.from_dict(
        {"schema": "gait-problem/v1", "gait": "walk",
         "target_velocity": 0.3, "swing_apex": 0.05})
    assert p.name == "walk"
    assert p.target_velocity == 0.3
    assert p.swing_apex == 0.05
    assert p.mode_sequence[0][0] is DOUBLE_STANCE

    q = GaitSynthesisProblem.from_dict(
        {"schema": "gait-problem/v1", "name": "custom",
         "target_velocity": 0.0,
         "mode_sequence": [[LEFT_STANCE.mode_id, 0.3]],
         "nodes_per_mode": [12]})
    assert q.mode_sequence == ((LEFT_STANCE, 0.3),)

    with pytest.raises(GaitSynthError, match="schema"):
        GaitSynthesisProblem.from_dict({"gait": "walk"})
    with pytest.raises(GaitSynthError, match="family"):
        GaitSynthesisProblem.from_dict(
            {"schema": "gait-problem/v1", "gait": "gallop"})
    with pytest.raises(GaitSynthError, match="field"):
        GaitSynthesisProblem.from_dict(
            {"schema": "gait-problem/v1", "gait": "trot", "bogus": 1})


# ---------------------------------------------------------------------------
# synthesis gates


def test_synthesize_meets_its_acceptance_bounds(model, small_trot):
    meta = small_trot.meta
    assert meta["solver"]["status"].startswith("converged")
    assert meta["defect"] < DEFECT_TOL
    assert meta["validation"]["ok"]

    report = validate_gait(model, small_trot)
    assert report.ok
    assert report.residual.r_y < RESIDUAL_TOL
    assert report.residual.r_ydot < RESIDUAL_TOL
    assert report.guard_height < GUARD_TOL
    # zero-velocity target: the step itself must not translate the base
    drift = small_trot.x_samples[-1, 0] - small_trot.x_samples[0, 0]
    assert abs(drift) <= SPEED_TOL * small_trot.step_duration


def test_synthesize_zeroes_swing_forces(walk):
    # single-stance portion of the walk: the right foot swings, and its
    # stored force feedforward must be identically zero there
    starts = walk.mode_starts
    mids = (walk.t_samples[:-1] + walk.t_samples[1:]) / 2
    in_single = mids > starts[1]
    assert in_single.sum() >= 20
    np.testing.assert_array_equal(
        walk.u_samples[in_single][:, NJ + 2:NJ + 4], 0.0)
    assert walk.u_samples.shape == (walk.t_samples.shape[0] - 1, NU)


def test_synthesize_rejects_infeasible_velocity(model):
    with pytest.raises(GaitSynthError, match="infeasible"):
        synthesize(model, GaitSynthesisProblem.walk(10.0))


def test_synthesize_nonconvergence_carries_diagnostics(model):
    starved = SolverSettings(backend="kkt", max_iters=2, tol_feas=1e-9,
                             tol_kkt=1e-12)
    with pytest.raises(GaitSynthError, match="did not converge") as err:
        synthesize(model, GaitSynthesisProblem.trot(intervals=10),
                   settings=starved)
    assert err.value.solution is not None
    assert "iter" in str(err.value)


# ---------------------------------------------------------------------------
# packaged gaits and validation reports


def test_builtin_gaits_load_and_accept(model):
    for name, speed in [("trot", 0.0), ("walk", 0.5)]:
        gait = builtin_gait(name)
        assert gait.name == name
        assert gait.nominal_speed == pytest.approx(speed, abs=1e-12)
        report = validate_gait(model, gait)
        assert report.ok, report.describe()
        assert report.residual.accepted
        assert all(v["ok"] for v in report.limits.values())


def test_builtin_gait_unknown_name_lists_choices():
    with pytest.raises(GaitSynthError, match="trot"):
        builtin_gait("moonwalk")


def test_zero_dynamics_residual_acceptance_predicate():
    good = ZeroDynamicsResidual(r_y=1e-8, r_ydot=9e-7)
    assert good.r_y >= 0 and good.r_ydot >= 0
    assert good.accepted
    assert not ZeroDynamicsResidual(r_y=2e-6, r_ydot=0.0).accepted
    assert not ZeroDynamicsResidual(r_y=0.0, r_ydot=2e-6).accepted
    assert good.to_dict()["accepted"] is True


def test_validate_gait_flags_broken_periodicity(model, trot):
    broken = load_gait_roundtrip(trot)
    broken.x_samples[-1, NQ + 3:] += 0.05
    report = validate_gait(model, broken)
    assert not report.ok
    assert report.residual.r_ydot > RESIDUAL_TOL


def test_validate_gait_flags_guard_violation(model, trot):
    floating = load_gait_roundtrip(trot)
    floating.x_samples[-1, 1] += 0.02     # lift the whole final pose
    report = validate_gait(model, floating)
    assert not report.ok
    assert report.guard_height > GUARD_TOL


def load_gait_roundtrip(gait):
    from wbmpc.references import HzdGait
    return HzdGait.from_dict(json.loads(json.dumps(gait.to_dict())))


def test_validate_gait_reports_file_errors(tmp_path, model, trot):
    path = tmp_path / "gait.json"
    save_gait(trot, path)
    assert validate_gait(model, path).ok

    path.write_text("{ not json")
    report = validate_gait(model, path)
    assert not report.ok
    assert "JSONDecodeError" in report.error

    report = validate_gait(model, tmp_path / "missing.json")
    assert not report.ok and report.error


def test_gait_roundtrips_through_json(tmp_path, walk):
    path = tmp_path / "walk.json"
    save_gait(walk, path)
    back = load_gait(path)
    np.testing.assert_array_equal(back.x_samples, walk.x_samples)
    np.testing.assert_array_equal(back.u_samples, walk.u_samples)
    np.testing.assert_array_equal(back.bezier_joints, walk.bezier_joints)
    assert back.mode_sequence == walk.mode_sequence
    assert back.meta["solver"]["status"] == walk.meta["solver"]["status"]


# ---------------------------------------------------------------------------
# playback references


class _Ev:
    def __init__(self, kind, t, **payload):
        self.kind = kind
        self.time = t
        self.payload = payload


def _advance_steps(pb, n):
    # feed the touchdowns the plant would report, one per step boundary
    T = pb.gait.step_duration
    for k in range(n):
        foot = pb.expected_lander()
        assert pb.observe([_Ev("touchdown", (k + 1) * T, foot=foot)])


def test_playback_reference_interpolates_the_samples(model, trot):
    pb = GaitPlayback(model, trot)
    for k in (0, 3, 9, trot.t_samples.shape[0] - 1):
        x, _, _ = pb.reference(trot.t_samples[k])
        np.testing.assert_allclose(x, trot.x_samples[k], atol=1e-9)


def test_playback_relabels_odd_steps(model, trot):
    pb = GaitPlayback(model, trot)
    t = 0.1
    x0, u0, m0 = pb.reference(t)
    _advance_steps(pb, 1)
    x1, u1, m1 = pb.reference(t + trot.step_duration)
    np.testing.assert_allclose(x1, relabel_state(x0), atol=1e-12)
    np.testing.assert_allclose(u1, relabel_input(u0), atol=1e-12)
    assert m1 == relabel_mode(m0)


def test_playback_walk_advances_one_displacement_per_step(model, walk):
    pb = GaitPlayback(model, walk)
    x0, _, _ = pb.reference(0.02)
    _advance_steps(pb, 2)
    x2, _, _ = pb.reference(0.02 + 2 * walk.step_duration)
    assert x2[0] - x0[0] == pytest.approx(2 * walk.displacement, abs=1e-12)
    np.testing.assert_allclose(x2[1:], x0[1:], atol=1e-12)


def test_playback_coasts_past_the_step_end_until_touchdown(model, trot):
    pb = GaitPlayback(model, trot)
    T = trot.step_duration
    x_end, _, _ = pb.reference(T)
    x_late, u_late, _ = pb.reference(T + 0.02)
    # pose ramps at the stored end rates, rates hold, accel demand drops
    np.testing.assert_allclose(
        x_late[:NQ], x_end[:NQ] + 0.02 * x_end[NQ:], atol=1e-12)
    np.testing.assert_allclose(x_late[NQ:], x_end[NQ:], atol=1e-12)
    np.testing.assert_array_equal(u_late[:NJ], 0.0)


def test_playback_steps_on_expected_touchdown_only(model, trot):
    pb = GaitPlayback(model, trot)
    lander = pb.expected_lander()
    assert lander == 1                     # left stance swings the right foot

    # scuff right after liftoff: inside the half-period window, ignored
    assert not pb.observe([_Ev("touchdown", 0.01, foot=lander)])
    assert pb.step_index == 0
    # wrong foot: ignored
    assert not pb.observe([_Ev("touchdown", 0.34, foot=1 - lander)])
    # the real strike advances and re-anchors the step clock
    assert pb.observe([_Ev("touchdown", 0.348, foot=lander)])
    assert pb.step_index == 1
    assert pb.step_start == pytest.approx(0.348)
    assert pb.expected_lander() == 1 - lander


def test_playback_torque_is_bounded(model, walk):
    pb = GaitPlayback(model, walk)
    lim = model.limits
    rng = np.random.default_rng(5)
    for t in rng.uniform(0.0, 2 * walk.step_duration, size=8):
        x_ref, _, _ = pb.reference(t)
        tau = pb.torque(x_ref + rng.normal(scale=0.02, size=NX), t)
        assert np.all(tau <= lim.tau_max + 1e-12)
        assert np.all(tau >= lim.tau_min - 1e-12)
        assert np.all(np.isfinite(tau))


# ---------------------------------------------------------------------------
# contact-consistent computed torque


def test_inverse_dynamics_realizes_joint_demand(model, trot):
    plant = Plant(model, SimConfig(), x0=trot.x_samples[0],
                  contacts=(True, False))
    a = np.array([0.4, -0.3, 0.25, -0.15])
    tau = plant.inverse_dynamics(a)
    qdd, _ = constrained_forward_dynamics(model, trot.x_samples[0], tau,
                                          LEFT_STANCE)
    np.testing.assert_allclose(qdd[3:], a, atol=1e-6)


def test_inverse_dynamics_realizes_base_demand_in_double_stance(model, walk):
    plant = Plant(model, SimConfig(), x0=walk.x_samples[0],
                  contacts=(True, True))
    a = np.array([0.3, -0.2, 0.5])
    tau = plant.inverse_dynamics(a, coords=(0, 1, 2))
    qdd, _ = constrained_forward_dynamics(model, walk.x_samples[0], tau,
                                          DOUBLE_STANCE)
    np.testing.assert_allclose(qdd[:3], a, atol=1e-6)


def test_inverse_dynamics_validates_its_demand(model, trot):
    plant = Plant(model, SimConfig(), x0=trot.x_samples[0],
                  contacts=(True, False))
    with pytest.raises(PlantError, match="disagree"):
        plant.inverse_dynamics(np.zeros(3))
    with pytest.raises(PlantError, match="range"):
        plant.inverse_dynamics(np.zeros(2), coords=(5, 9))
    with pytest.raises(PlantError, match="unpinned"):
        plant.inverse_dynamics(np.zeros(3), coords=(0, 1, 2),
                               mode=DOUBLE_STANCE)


# ---------------------------------------------------------------------------
# plant replay


def test_trot_replay_keeps_the_base_in_place(model, trot):
    log = replay_gait(model, trot, cycles=1,
                      config=SimConfig(physics_step=5e-4))
    s = log.summary
    assert s["closed"] and not s["fell"] and not s["fault"]
    assert s["steps_completed"] == 2
    assert abs(s["net_displacement"]) < 1e-4
    assert s["touchdowns"] >= 2
    assert s["return_error"] < 5e-3


def test_replay_log_arrays_are_aligned(model, trot):
    log = replay_gait(model, trot, cycles=1,
                      config=SimConfig(physics_step=1e-3))
    assert log.t.shape[0] == log.x.shape[0] == log.tau.shape[0]
    assert log.x.shape[1] == NX
    assert log.tau.shape[1] == NJ
    assert np.all(np.diff(log.t) > 0)
