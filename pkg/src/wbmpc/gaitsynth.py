"""Offline synthesis of periodic gaits over the full hybrid dynamics.

One step of the cycle is transcribed as a multiple-shooting trajectory
problem on the reparameterized dynamics, reusing the controller's solver
with two-point boundary rows that close the cycle: the state after the
touchdown velocity reset at the step end, relabeled left-for-right, must
reproduce the initial state shifted by one step displacement.  Contact
changes inside the step are lift-offs (continuous, no reset), so the
velocity reset sits exactly at the step boundary where the swing foot
lands.  Only one step is ever optimized; the other half of the cycle is
its mirror image.

A solution is packaged as an HzdGait: state and input samples at the
shooting nodes plus a per-mode Bezier encoding of each actuated joint,
endpoint-pinned in value and rate.  Because the encoding is exact at the
mode boundaries and the boundary rows close the orbit, the tracked
outputs vanish again right after the reset (hybrid invariance) up to
solver feasibility.  Acceptance re-verifies this through the plant-grade
impulse map rather than the solver's own reset evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import (
    chain_of, foot_heights, flow_masked, impulse_map, kinematics,
    mass_and_bias, mode_mask, recover_torques,
)
from .model import (
    DOUBLE_STANCE, LEFT_STANCE, NF, NJ, NQ, NU, NX,
    ContactMode, ModelError, RobotModel, leg_ik, nominal_stance,
)
from .mpc import _node_outputs
from .ocp import RelaxedBarrier, ShootingProblem, SolverSettings, solve_ocp
from .plant import Plant, SimConfig
from .references import (
    Command, HzdGait, SwingProfile, bernstein_basis, bezier_eval, bump,
    fit_bezier as _pinned_fit, load_gait, relabel_input, relabel_mode,
    relabel_state,
)


class GaitSynthError(RuntimeError):
    """Synthesis failure; carries the solver result when one exists."""

    def __init__(self, message: str, solution=None):
        super().__init__(message)
        self.solution = solution


# Acceptance thresholds (defect and residual limits a gait must meet).
DEFECT_TOL = 1e-7
RESIDUAL_TOL = 1e-6
GUARD_TOL = 1e-6
SPEED_TOL = 1e-3

# A fit this bad means the stored curve no longer represents the samples
# (the synthesized gaits stay one to two orders below this).
FIT_TOL = 2e-2


# ---------------------------------------------------------------------------
# problem description


@dataclass(frozen=True)
class GaitSynthesisProblem:
    """One-step gait optimization setup.

    ``mode_sequence`` lists the contact modes of a single step with their
    durations; the full cycle is this step followed by its left/right
    mirror.  Transitions inside the step must be lift-offs; the touchdown
    reset is implied at the step end.  ``nodes_per_mode`` subdivides each
    mode into shooting intervals (at least 10 each).  Bounds come from
    the robot model limits; the weights trade torque effort against the
    touchdown impulse and the swing/posture shaping terms.
    """

    name: str
    target_velocity: float
    mode_sequence: tuple
    nodes_per_mode: tuple
    w_effort: float = 1e-3
    w_impact: float = 1e-2
    w_accel: float = 1e-4
    w_force: float = 1e-6
    w_swing: float = 400.0
    w_posture: float = 100.0
    swing_apex: float = 0.06
    base_height: float = 0.68
    friction_mu: float = 0.6
    touchdown_speed: float = 0.1
    bezier_degree: int = 6

    def __post_init__(self):
        if not self.mode_sequence:
            raise GaitSynthError("mode sequence must not be empty")
        if len(self.nodes_per_mode) != len(self.mode_sequence):
            raise GaitSynthError("need one node count per mode")
        for mode, dur in self.mode_sequence:
            if not isinstance(mode, ContactMode) or mode.n_contacts == 0:
                raise GaitSynthError("every mode needs at least one stance foot")
            if not (np.isfinite(dur) and dur > 0):
                raise GaitSynthError("mode durations must be positive")
        for n in self.nodes_per_mode:
            if int(n) != n or n < 10:
                raise GaitSynthError("need at least 10 nodes per mode")
        if not np.isfinite(self.target_velocity):
            raise GaitSynthError("target velocity must be finite")
        weights = (self.w_effort, self.w_impact, self.w_accel, self.w_force,
                   self.w_swing, self.w_posture)
        if not all(np.isfinite(w) and w >= 0 for w in weights):
            raise GaitSynthError("cost weights must be finite and nonnegative")
        if not (0 < self.swing_apex < 0.5):
            raise GaitSynthError("swing apex must lie in (0, 0.5) m")
        if self.base_height <= 0 or self.friction_mu <= 0:
            raise GaitSynthError("base height and friction must be positive")
        if not (np.isfinite(self.touchdown_speed)
                and self.touchdown_speed >= 0):
            raise GaitSynthError("touchdown speed must be nonnegative")
        if self.bezier_degree < 3:
            raise GaitSynthError("endpoint rate pins need degree >= 3")

    @property
    def step_duration(self) -> float:
        return float(sum(d for (_, d) in self.mode_sequence))

    @property
    def displacement(self) -> float:
        return self.target_velocity * self.step_duration

    @classmethod
    def trot(cls, target_velocity: float = 0.0,
             stance_duration: float = 0.35, intervals: int = 25,
             **overrides) -> "GaitSynthesisProblem":
        """Alternating single stance with an instantaneous exchange."""
        return cls(name="trot", target_velocity=target_velocity,
                   mode_sequence=((LEFT_STANCE, stance_duration),),
                   nodes_per_mode=(intervals,), **overrides)

    @classmethod
    def walk(cls, target_velocity: float = 0.5,
             single_duration: float = 0.35, double_duration: float = 0.05,
             intervals: tuple = (10, 25), **overrides) -> "GaitSynthesisProblem":
        """Double stance, then the rear foot lifts and swings through.

        The striking foot comes down at a quarter metre per second.  A
        shallower approach makes the strike time hypersensitive to pitch
        error, and the cycle-to-cycle timing loop goes unstable.
        """
        seq = ((DOUBLE_STANCE, double_duration),
               (LEFT_STANCE, single_duration))
        overrides.setdefault("touchdown_speed", 0.25)
        return cls(name="walk", target_velocity=target_velocity,
                   mode_sequence=seq, nodes_per_mode=tuple(intervals),
                   **overrides)

    @classmethod
    def from_dict(cls, data: dict) -> "GaitSynthesisProblem":
        """Problem from a ``gait-problem/v1`` document.

        ``gait`` selects a family ("trot" or "walk") whose defaults any
        other field overrides; without it, ``mode_sequence`` (pairs of
        mode id and duration) and ``nodes_per_mode`` are required.
        """
        if data.get("schema") != "gait-problem/v1":
            raise GaitSynthError(
                f"unsupported problem schema {data.get('schema')!r}")
        body = dict(data)
        body.pop("schema")
        family = body.pop("gait", None)
        if "mode_sequence" in body:
            body["mode_sequence"] = tuple(
                (ContactMode.from_id(int(m)), float(d))
                for (m, d) in body["mode_sequence"])
        if "nodes_per_mode" in body:
            body["nodes_per_mode"] = tuple(int(n)
                                           for n in body["nodes_per_mode"])
        try:
            if family is None:
                return cls(**body)
            if family == "trot":
                return replace(cls.trot(), **body)
            if family == "walk":
                return replace(cls.walk(), **body)
        except TypeError as exc:
            raise GaitSynthError(f"bad problem field: {exc}") from None
        raise GaitSynthError(f"unknown gait family {family!r}")


# ---------------------------------------------------------------------------
# leg relabeling and the touchdown reset

# State permutation swapping the left and right leg coordinates.
_PERM = (0, 1, 2, 5, 6, 3, 4, 7, 8, 9, 12, 13, 10, 11)


def relabel_matrix() -> np.ndarray:
    """Permutation matrix R with R x = x with the legs exchanged."""
    return np.eye(NX)[list(_PERM)]


def _landing_feet(mode_sequence) -> tuple:
    """Feet the step-end reset pins: everything planted at the exchange.

    That is the final mode's stance set joined with the stance set of
    the mirrored next step's first mode, matching how the simulator
    resolves a touchdown that arrives with other feet on the ground.
    """
    final = mode_sequence[-1][0].stance_feet
    incoming = relabel_mode(mode_sequence[0][0]).stance_feet
    return tuple(sorted(set(final) | set(incoming)))


def _impulse(chain, x, feet):
    """Touchdown velocity reset and contact impulse, batched, complex-safe.

    Same saddle system as the plant-grade impulse map; this variant
    accepts complex batches so it can sit inside solver callbacks, and
    skips the conditioning guard (a singular iterate surfaces as a
    non-finite residual, which the solver treats as a rejected point).
    """
    x = np.asarray(x)
    q, qd = x[..., :NQ], x[..., NQ:]
    if not feet:
        return x, np.zeros(x.shape[:-1] + (0,))
    d, _, kin = mass_and_bias(chain, q, qd)
    jac = np.concatenate([kin.foot_jac[f] for f in feet], axis=-2)
    nc = 2 * len(feet)
    n = NQ + nc
    batch = np.broadcast_shapes(d.shape[:-2], qd.shape[:-1])
    dtype = np.result_type(d.dtype, x.dtype)
    kkt = np.zeros(batch + (n, n), dtype)
    kkt[..., :NQ, :NQ] = d
    kkt[..., :NQ, NQ:] = -np.swapaxes(jac, -1, -2)
    kkt[..., NQ:, :NQ] = jac
    rhs = np.zeros(batch + (n,), dtype)
    rhs[..., :NQ] = np.einsum("...ij,...j->...i", d, qd)
    sol = np.linalg.solve(kkt, rhs[..., None])[..., 0]
    x_post = np.concatenate(
        [np.broadcast_to(q, batch + (NQ,)), sol[..., :NQ]], axis=-1)
    return x_post, sol[..., NQ:]


# ---------------------------------------------------------------------------
# transcription


@dataclass(frozen=True)
class _StepGrid:
    t_nodes: np.ndarray          # (N+1,)
    modes: tuple                 # N interval modes
    masks: np.ndarray            # (N, 4)
    dts: np.ndarray              # (N,)
    stance: np.ndarray           # (N, NF) bool
    phases: np.ndarray           # (N,) interval phase within its mode
    node_slices: tuple           # per mode: node index range, ends inclusive


def _step_grid(problem: GaitSynthesisProblem) -> _StepGrid:
    t = [0.0]
    modes = []
    phases = []
    slices = []
    for (mode, dur), n in zip(problem.mode_sequence, problem.nodes_per_mode):
        k0 = len(t) - 1
        t0 = t[-1]
        t.extend(t0 + dur * np.arange(1, n + 1) / n)
        modes.extend([mode] * n)
        phases.extend(np.arange(n) / n)
        slices.append(slice(k0, k0 + n + 1))
    t_nodes = np.asarray(t)
    masks = np.stack([mode_mask(m) for m in modes])
    return _StepGrid(t_nodes, tuple(modes), masks, np.diff(t_nodes),
                     masks[:, 1::2] > 0.5, np.asarray(phases), tuple(slices))


def _transcribe(model: RobotModel, problem: GaitSynthesisProblem,
                grid: _StepGrid) -> ShootingProblem:
    chain = chain_of(model)
    lim = model.limits
    N = grid.masks.shape[0]
    masks = grid.masks
    dts = grid.dts
    dts_col = dts[:, None]
    sq_dt = np.sqrt(dts)[:, None]
    stance = grid.stance
    mu_c = problem.friction_mu

    w_tau = np.sqrt(problem.w_effort)
    w_acc = np.sqrt(problem.w_accel)
    w_frc = np.sqrt(problem.w_force)
    w_post = np.sqrt(problem.w_posture)
    posture_ref = np.array([problem.base_height, 0.0])
    # swing feet track an arc peaking at the apex mid-mode; stance rows
    # are weighted out rather than removed so the layout stays static
    h_target = problem.swing_apex * bump(grid.phases)[:, None] * (~stance)
    w_swing = np.where(stance, 0.0, np.sqrt(problem.w_swing))

    def stage(X, U):
        tau, y = _node_outputs(chain, X, U, masks)
        p, v = y[..., 0:2], y[..., 2:4]
        h = p[..., 1]
        r = np.concatenate([
            w_tau * tau,
            w_acc * U[..., :NJ],
            w_frc * U[..., NJ:],
            w_swing * (h - h_target),
            w_post * (X[..., 1:3] - posture_ref),
        ], axis=-1) * sq_dt

        lam_t = U[..., NJ + 0::2]
        lam_n = U[..., NJ + 1::2]
        # planted feet are pinned at the velocity level, node by node, so
        # the discrete solution carries no contact drift for a simulator's
        # constraint stabilization to fight; the forces absorb whatever
        # integration truncation that takes
        e = np.stack([
            v[..., 0],
            v[..., 1],
            lam_t,
            lam_n,
        ], axis=-1).reshape(v.shape[:-2] + (4 * NF,))

        q_j = X[..., 3:3 + NJ]
        qd_j = X[..., NQ + 3:]
        cone = np.stack([mu_c * lam_n + lam_t, mu_c * lam_n - lam_t],
                        axis=-1).reshape(lam_n.shape[:-1] + (2 * NF,))
        cone = np.where(np.repeat(stance, 2, axis=-1), cone, 1.0)
        clearance = np.where(stance, 1.0, h)
        g = np.concatenate([
            lim.tau_max - tau, tau - lim.tau_min,
            lim.q_max - q_j, q_j - lim.q_min,
            lim.qd_max - qd_j, qd_j - lim.qd_min,
            clearance,
            cone,
        ], axis=-1)
        return r, e, g

    def dyn(X, U):
        k1 = flow_masked(chain, X, U, masks)
        k2 = flow_masked(chain, X + 0.5 * dts_col * k1, U, masks)
        k3 = flow_masked(chain, X + 0.5 * dts_col * k2, U, masks)
        k4 = flow_masked(chain, X + dts_col * k3, U, masks)
        return X + (dts_col / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    # the reset pins every foot planted at the exchange: the feet still
    # in stance plus the lander, exactly the set the simulator pins when
    # a touchdown arrives with other feet still on the ground
    land_feet = _landing_feet(problem.mode_sequence)
    init_feet = problem.mode_sequence[0][0].stance_feet
    touch_feet = tuple(f for f in problem.mode_sequence[-1][0].swing_feet
                       if f in land_feet)
    final_feet = problem.mode_sequence[-1][0].stance_feet
    v_td = problem.touchdown_speed
    offset = np.zeros(NX)
    offset[0] = problem.displacement

    def boundary(x0, xN):
        x0 = np.asarray(x0)
        xN = np.asarray(xN)
        x_post, _ = _impulse(chain, xN, land_feet)
        periodic = x_post[..., _PERM] - x0 - offset
        gauge = x0[..., 0:1]
        kin0 = kinematics(chain, x0[..., :NQ], x0[..., NQ:])
        touch = [kin0.foot_p[f][..., 1:2] for f in init_feet]
        # transversal touchdown: the striking foot arrives descending at
        # the prescribed speed instead of grazing in tangentially
        kin_n = kinematics(chain, xN[..., :NQ], xN[..., NQ:])
        strike = [np.einsum("...ij,...j->...i", kin_n.foot_jac[f],
                            xN[..., NQ:])[..., 1:2] + v_td
                  for f in touch_feet]
        # the terminal node sees no stage rows, and the reset projection
        # hides its planted-foot velocities from the periodicity map, so
        # pin them here or the optimizer is free to slide the stance foot
        # into the impact
        still = [np.einsum("...ij,...j->...i", kin_n.foot_jac[f],
                           xN[..., NQ:])
                 for f in final_feet]
        return np.concatenate([periodic, gauge] + touch + strike + still,
                              axis=-1)

    w_imp = np.sqrt(problem.w_impact)

    def term(xN):
        _, imp = _impulse(chain, np.asarray(xN), land_feet)
        return w_imp * imp

    eq_mask = np.zeros((N, 4 * NF), bool)
    for f in range(NF):
        eq_mask[:, 4 * f + 0] = stance[:, f]
        eq_mask[:, 4 * f + 1] = stance[:, f]
        eq_mask[:, 4 * f + 2] = ~stance[:, f]
        eq_mask[:, 4 * f + 3] = ~stance[:, f]
        # the reset projects planted-foot velocities to zero, so node 0
        # already has its pinning rows through the periodicity map and
        # repeating them would degenerate the constraint Jacobian
        eq_mask[0, 4 * f + 0] = False
        eq_mask[0, 4 * f + 1] = False

    n_ineq = 6 * NJ + NF + 2 * NF
    g_weight = np.tile(dts[:, None], (1, n_ineq))
    g_weight[:, 6 * NJ:6 * NJ + NF] *= ~stance
    g_weight[:, 6 * NJ + NF:] *= np.repeat(stance, 2, axis=-1)

    # a foot leaving stance at an internal mode boundary is unloaded over
    # the final interval of the earlier mode (force rows join its
    # stationarity rows), so its liftoff carries no force discontinuity
    for i in range(len(problem.mode_sequence) - 1):
        staying = problem.mode_sequence[i + 1][0].stance_feet
        k_last = grid.node_slices[i].stop - 2
        for f in problem.mode_sequence[i][0].stance_feet:
            if f not in staying:
                eq_mask[k_last, 4 * f + 2] = True
                eq_mask[k_last, 4 * f + 3] = True
                cone = 6 * NJ + NF + 2 * f
                g_weight[k_last, cone:cone + 2] = 0.0

    return ShootingProblem(
        nx=NX, nu=NU, N=N, dynamics=dyn, stage=stage, terminal=term,
        n_res=NU + NJ + NF + 2, n_eq=4 * NF, n_ineq=n_ineq,
        n_res_T=2 * len(land_feet),
        barrier=RelaxedBarrier(1e-3, 1e-3),
        g_weight=g_weight, eq_mask=eq_mask,
        boundary=boundary,
        n_boundary=NX + 1 + len(init_feet) + len(touch_feet)
                   + 2 * len(final_feet))


def _initial_guess(model: RobotModel, problem: GaitSynthesisProblem,
                   grid: _StepGrid):
    """Kinematic seed: the base glides at the target speed, stance feet
    hold mirrored anchors, the swing foot follows an arc to its landing
    point one displacement ahead."""
    T = problem.step_duration
    d = problem.displacement
    z0 = problem.base_height
    t = grid.t_nodes
    n1 = t.shape[0]

    main = problem.mode_sequence[-1][0]
    if len(main.swing_feet) != 1:
        raise GaitSynthError("the final mode must have exactly one swing foot")
    swing = main.swing_feet[0]
    t_sw = float(sum(dur for (_, dur) in problem.mode_sequence[:-1]))

    feet = np.zeros((n1, NF, 2))
    feet[:, 1 - swing, 0] = 0.5 * d
    prof = SwingProfile((-0.5 * d, 0.0), (1.5 * d, 0.0), t_sw, T,
                        problem.swing_apex)
    feet[:, swing, :] = prof.position(t)

    q = np.zeros((n1, NQ))
    q[:, 0] = d * t / T
    q[:, 1] = z0
    for k in range(n1):
        for f in range(NF):
            hip, knee = leg_ik(model, feet[k, f, 0] - q[k, 0],
                               feet[k, f, 1] - z0)
            q[k, 3 + 2 * f] = hip
            q[k, 4 + 2 * f] = knee
    qd = np.gradient(q, t, axis=0)
    X0 = np.concatenate([q, qd], axis=-1)

    U0 = np.zeros((grid.masks.shape[0], NU))
    U0[:, :NJ] = np.gradient(qd, t, axis=0)[:-1, 3:]
    share = model.total_mass * (-model.gravity[1])
    n_st = grid.stance.sum(axis=1)
    for f in range(NF):
        U0[:, NJ + 2 * f + 1] = np.where(grid.stance[:, f], share / n_st, 0.0)
    return X0, U0


# ---------------------------------------------------------------------------
# synthesis driver


def synthesize(model: RobotModel, problem: GaitSynthesisProblem,
               settings: Optional[SolverSettings] = None) -> HzdGait:
    """Optimize one step and package it as a periodic gait.

    Raises GaitSynthError when the target velocity is outside the
    command envelope, the solver fails to converge (the error carries
    the solver result with its iterate trace), or the solution violates
    an acceptance bound: defects below DEFECT_TOL at every node, guard
    height below GUARD_TOL, average speed within SPEED_TOL of the
    target, and hybrid-invariance residuals below RESIDUAL_TOL when
    re-verified through the plant-grade impulse map.
    """
    envelope = Command().max_speed
    if abs(problem.target_velocity) > envelope:
        raise GaitSynthError(
            f"target velocity {problem.target_velocity} m/s is infeasible: "
            f"outside the {envelope} m/s command envelope")

    grid = _step_grid(problem)
    shooting = _transcribe(model, problem, grid)
    X0, U0 = _initial_guess(model, problem, grid)
    st = settings or SolverSettings(backend="kkt", max_iters=400,
                                    tol_feas=1e-9, tol_kkt=1e-4)
    sol = solve_ocp(shooting, X0, U0, st)
    if not sol.converged:
        tail = [{k: v for (k, v) in row.items() if k in
                 ("iter", "cost", "feas", "kkt", "alpha")}
                for row in sol.trace[-3:]]
        raise GaitSynthError(
            f"gait optimization did not converge: {sol.status} after "
            f"{sol.iterations} iterations (cost {sol.cost:.4e}, "
            f"feasibility {sol.feas_inf:.2e}); last iterates: {tail}",
            solution=sol)

    X = sol.X
    U = sol.U.copy()
    # swing forces are equality-driven to the feasibility level; the flow
    # masks them out entirely, so zeroing changes no defect while making
    # the stored inputs exact for strict consumers
    U[:, NJ:] *= grid.masks

    defect = float(np.max(np.abs(
        np.asarray(shooting.dynamics(X[:-1], U)) - X[1:])))
    if defect > DEFECT_TOL:
        raise GaitSynthError(
            f"dynamics defect {defect:.2e} exceeds {DEFECT_TOL:.0e}",
            solution=sol)

    speed = (X[-1, 0] - X[0, 0]) / problem.step_duration
    if abs(speed - problem.target_velocity) > SPEED_TOL:
        raise GaitSynthError(
            f"average speed {speed:.6f} misses the target "
            f"{problem.target_velocity} by more than {SPEED_TOL}",
            solution=sol)

    heights = foot_heights(model, X[-1, :NQ])
    touch_feet = [f for f in problem.mode_sequence[-1][0].swing_feet
                  if f in _landing_feet(problem.mode_sequence)]
    guard = float(np.max(np.abs([heights[f] for f in touch_feet])))
    if guard > GUARD_TOL:
        raise GaitSynthError(
            f"touchdown guard height {guard:.2e} exceeds {GUARD_TOL:.0e}",
            solution=sol)

    alphas = np.zeros((len(problem.mode_sequence), NJ,
                       problem.bezier_degree + 1))
    fit_err = 0.0
    for i, (mode, dur) in enumerate(problem.mode_sequence):
        sl = grid.node_slices[i]
        s = (grid.t_nodes[sl] - grid.t_nodes[sl.start]) / dur
        for j in range(NJ):
            y = X[sl, 3 + j]
            d0 = X[sl.start, NQ + 3 + j] * dur
            d1 = X[sl.stop - 1, NQ + 3 + j] * dur
            alphas[i, j], err = fit_bezier(s, y, problem.bezier_degree,
                                           end_derivatives=(d0, d1))
            fit_err = max(fit_err, err)

    meta = {
        "target_velocity": problem.target_velocity,
        "nodes_per_mode": [int(n) for n in problem.nodes_per_mode],
        "weights": {"effort": problem.w_effort, "impact": problem.w_impact,
                    "accel": problem.w_accel, "force": problem.w_force,
                    "swing": problem.w_swing, "posture": problem.w_posture},
        "swing_apex": problem.swing_apex,
        "friction_mu": problem.friction_mu,
        "touchdown_speed": problem.touchdown_speed,
        "solver": {"status": sol.status, "iterations": sol.iterations,
                   "cost": sol.cost, "feas_inf": sol.feas_inf,
                   "kkt_inf": sol.kkt_inf},
        "defect": defect,
        "fit_error": fit_err,
    }
    gait = HzdGait(
        name=problem.name,
        step_duration=problem.step_duration,
        displacement=problem.displacement,
        mode_sequence=list(problem.mode_sequence),
        t_samples=grid.t_nodes.copy(),
        x_samples=X,
        u_samples=U,
        bezier_degree=problem.bezier_degree,
        bezier_joints=alphas,
        meta=meta,
    )

    report = validate_gait(model, gait)
    if not report.ok:
        raise GaitSynthError(
            f"synthesized gait failed validation: {report.describe()}",
            solution=sol)
    gait.meta["validation"] = report.to_dict()
    return gait


# ---------------------------------------------------------------------------
# Bezier fitting


def fit_bezier(s_samples, y_samples, degree: int = 5,
               end_derivatives=None):
    """Pinned least-squares Bernstein fit; returns (alpha, max_error).

    Endpoint coefficients are fixed to the first and last sample (and,
    with ``end_derivatives`` in curve-parameter units, the adjacent
    coefficients to the endpoint slopes); the interior minimizes the
    squared sample residual.  ``max_error`` is the largest pointwise
    deviation of the fitted curve over the samples.
    """
    s = np.asarray(s_samples, float)
    y = np.asarray(y_samples, float)
    if s.ndim != 1 or y.shape != s.shape:
        raise GaitSynthError("need matching one-dimensional sample arrays")
    if s.shape[0] < degree + 1:
        raise GaitSynthError(
            f"degree {degree} needs at least {degree + 1} samples, "
            f"got {s.shape[0]}")
    if s.min() < -1e-9 or s.max() > 1.0 + 1e-9:
        raise GaitSynthError("phase samples must lie in [0, 1]")
    n_pins = 2 if end_derivatives is None else 4
    free = degree + 1 - n_pins
    if free > 0:
        basis = bernstein_basis(degree, s)
        cols = basis[:, 1:degree] if n_pins == 2 else basis[:, 2:degree - 1]
        if np.linalg.matrix_rank(cols) < free:
            raise GaitSynthError(
                "degenerate phase grid: the Bernstein basis is rank "
                "deficient over these samples")
    alpha = _pinned_fit(s, y, degree, end_derivatives)
    max_err = float(np.max(np.abs(bezier_eval(alpha, np.clip(s, 0, 1)) - y)))
    return alpha, max_err


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ZeroDynamicsResidual:
    """Output mismatch right after the cycle reset.

    ``r_y`` is the norm of the actuated-joint error against the first
    mode's encoding at phase zero, ``r_ydot`` the corresponding rate
    error, both evaluated on the reset-and-relabeled cycle end state.  A
    gait is accepted only when both stay below RESIDUAL_TOL: the encoded
    outputs then vanish along the whole cycle, including across the
    touchdown reset.
    """
    r_y: float
    r_ydot: float

    @property
    def accepted(self) -> bool:
        return self.r_y < RESIDUAL_TOL and self.r_ydot < RESIDUAL_TOL

    def to_dict(self) -> dict:
        return {"r_y": self.r_y, "r_ydot": self.r_ydot,
                "accepted": self.accepted}


@dataclass(frozen=True)
class GaitReport:
    """Validation outcome: reset residual, limit margins, encoding fit."""
    ok: bool
    error: Optional[str] = None
    residual: Optional[ZeroDynamicsResidual] = None
    guard_height: float = float("nan")
    fit_error: float = float("nan")
    limits: dict = field(default_factory=dict)

    def describe(self) -> str:
        if self.error is not None:
            return f"error: {self.error}"
        parts = [f"r_y={self.residual.r_y:.2e}",
                 f"r_ydot={self.residual.r_ydot:.2e}",
                 f"guard={self.guard_height:.2e}",
                 f"fit={self.fit_error:.2e}"]
        parts += [f"{k}_margin={v['margin']:.3f}"
                  for (k, v) in self.limits.items()]
        return ("ok: " if self.ok else "FAILED: ") + ", ".join(parts)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "error": self.error,
            "residual": None if self.residual is None
            else self.residual.to_dict(),
            "guard_height": self.guard_height,
            "fit_error": self.fit_error,
            "limits": self.limits,
        }


def _limit_entry(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> dict:
    margin = float(np.min(np.minimum(hi - values, values - lo)))
    return {"ok": bool(margin >= 0.0), "margin": margin,
            "max_abs": float(np.max(np.abs(values)))}


def validate_gait(model: RobotModel, gait) -> GaitReport:
    """Re-derive the acceptance evidence for a gait, report-only.

    ``gait`` may be an HzdGait or a path to one.  The reset residual is
    recomputed through the plant-grade impulse map (an independent route
    from the synthesis boundary rows), torque, joint and rate limits are
    checked along the samples, and the Bezier encoding is compared
    against the samples it was fitted to.  Malformed files yield a
    report with ``ok=False`` and the load error instead of raising.
    """
    if not isinstance(gait, HzdGait):
        try:
            gait = load_gait(gait)
        except (ModelError, OSError, ValueError, KeyError, TypeError,
                json.JSONDecodeError) as exc:
            return GaitReport(ok=False, error=f"{type(exc).__name__}: {exc}")
    if gait.bezier_joints.size == 0 or gait.x_samples.size == 0:
        return GaitReport(ok=False, error="empty gait encoding")

    mode0, dur0 = gait.mode_sequence[0]
    land = _landing_feet(gait.mode_sequence)
    x_plus, _ = impulse_map(model, gait.x_samples[-1],
                            ContactMode(0 in land, 1 in land))
    x_cycle = relabel_state(x_plus)
    basis0 = bernstein_basis(gait.bezier_degree, 0.0)
    basis1 = bernstein_basis(gait.bezier_degree, 0.0, order=1)
    y0 = gait.bezier_joints[0] @ basis0
    yd0 = gait.bezier_joints[0] @ basis1 / dur0
    residual = ZeroDynamicsResidual(
        r_y=float(np.linalg.norm(x_cycle[3:3 + NJ] - y0)),
        r_ydot=float(np.linalg.norm(x_cycle[NQ + 3:] - yd0)))

    heights = foot_heights(model, gait.x_samples[-1, :NQ])
    touch = [f for f in gait.mode_sequence[-1][0].swing_feet if f in land]
    guard = float(np.max(np.abs([heights[f] for f in touch])))

    starts = gait.mode_starts
    fit_err = 0.0
    for i, (mode, dur) in enumerate(gait.mode_sequence):
        inside = ((gait.t_samples >= starts[i] - 1e-9)
                  & (gait.t_samples <= starts[i + 1] + 1e-9))
        s = np.clip((gait.t_samples[inside] - starts[i]) / dur, 0.0, 1.0)
        curve = np.einsum("ji,...i->...j", gait.bezier_joints[i],
                          bernstein_basis(gait.bezier_degree, s))
        fit_err = max(fit_err, float(np.max(np.abs(
            curve - gait.x_samples[inside, 3:3 + NJ]))))

    tau = np.stack([
        recover_torques(model, gait.x_samples[k], gait.u_samples[k],
                        gait.mode_sequence[_mode_index(gait, k)][0])
        for k in range(gait.u_samples.shape[0])])
    lim = model.limits
    limits = {
        "tau": _limit_entry(tau, lim.tau_min, lim.tau_max),
        "q": _limit_entry(gait.x_samples[:, 3:3 + NJ], lim.q_min, lim.q_max),
        "qd": _limit_entry(gait.x_samples[:, NQ + 3:], lim.qd_min,
                           lim.qd_max),
    }

    ok = (residual.accepted and guard <= GUARD_TOL and fit_err <= FIT_TOL
          and all(v["ok"] for v in limits.values()))
    return GaitReport(ok=ok, residual=residual, guard_height=guard,
                      fit_error=fit_err, limits=limits)


def _mode_index(gait: HzdGait, k: int) -> int:
    """Mode owning sample interval k (the interval starting at node k)."""
    starts = gait.mode_starts
    t = gait.t_samples[k]
    return int(np.clip(np.searchsorted(starts, t + 1e-12) - 1, 0,
                       len(gait.mode_sequence) - 1))


# ---------------------------------------------------------------------------
# playback and packaged gaits


class GaitPlayback:
    """Replay references for a stored gait, stepped by touchdown events.

    Poses follow a cubic Hermite spline through the samples (the stored
    rates are the node slopes), rates are the spline's exact derivative
    and the joint-acceleration feedforward its second derivative, so the
    reference is self-consistent between nodes and a servo that realizes
    the demanded accelerations tracks it without forcing.  Contact-force
    feedforwards hold per interval.  Odd steps are left/right relabeled
    and the base target advances one displacement per step.  When the
    gait ends in a single swing foot the step counter advances on that
    foot's detected touchdown (fed in through ``observe``), so the
    reference phase stays locked to the physical exchange; past the
    nominal step end the pose coasts at the stored end rates with zero
    acceleration demand, which keeps a late swing foot descending
    instead of hovering at the ground.  Without a swing foot to wait
    for, the clock rolls over on its own.
    """

    def __init__(self, model: RobotModel, gait: HzdGait, kp: float = 300.0,
                 kd: float = 15.0, kp_base: float = 2500.0,
                 kd_base: float = 100.0, anchor: float = 0.0,
                 x_offset: float = 0.0):
        self.model = model
        self.gait = gait
        self.kp = float(kp)
        self.kd = float(kd)
        self.kp_base = float(kp_base)
        self.kd_base = float(kd_base)
        self.x_offset = float(x_offset)
        self.step_index = 0
        self.step_start = float(anchor)
        swing = gait.mode_sequence[-1][0].swing_feet
        self._lander = swing[0] if len(swing) == 1 else None

    @property
    def synced(self) -> bool:
        return self._lander is not None

    def expected_lander(self) -> Optional[int]:
        """Foot whose touchdown ends the current step (None if unstepped)."""
        if self._lander is None:
            return None
        return self._lander if self.step_index % 2 == 0 else 1 - self._lander

    def observe(self, events) -> bool:
        """Advance the step counter on the expected touchdown."""
        advanced = False
        half = 0.5 * self.gait.step_duration
        for e in events:
            if e.kind != "touchdown" \
                    or e.payload.get("foot") != self.expected_lander():
                continue
            # a scuff right after liftoff must not advance the step
            if e.time - self.step_start <= half:
                continue
            self.step_index += 1
            self.step_start = float(e.time)
            advanced = True
        return advanced

    def _local(self, t: float):
        """(step index, time within the step); clock-rolls when unsynced."""
        if self.synced:
            return self.step_index, float(t) - self.step_start
        T = self.gait.step_duration
        rel = float(t) - self.step_start
        k = int(np.floor(rel / T + 1e-12))
        return k, rel - k * T

    def _spline(self, tl: float):
        """Pose, rate, and acceleration of the sample spline at local time."""
        g = self.gait
        ts = g.t_samples
        i = int(np.clip(np.searchsorted(ts, tl + 1e-12) - 1, 0, len(ts) - 2))
        h = ts[i + 1] - ts[i]
        s = (tl - ts[i]) / h
        q0, q1 = g.x_samples[i, :NQ], g.x_samples[i + 1, :NQ]
        hv0, hv1 = h * g.x_samples[i, NQ:], h * g.x_samples[i + 1, NQ:]
        q = ((1 + 2 * s) * (1 - s) ** 2 * q0 + s * (1 - s) ** 2 * hv0
             + s * s * (3 - 2 * s) * q1 + s * s * (s - 1) * hv1)
        qd = (6 * s * (s - 1) * (q0 - q1)
              + (1 - 4 * s + 3 * s * s) * hv0
              + s * (3 * s - 2) * hv1) / h
        qdd = ((12 * s - 6) * (q0 - q1)
               + (6 * s - 4) * hv0 + (6 * s - 2) * hv1) / (h * h)
        return q, qd, qdd, i

    def reference(self, t: float):
        """(state, input, mode) of the cycle at absolute time t."""
        g = self.gait
        T = g.step_duration
        k, tl = self._local(t)
        if tl <= T:
            tl = max(tl, 0.0)
            q, qd, qdd, i = self._spline(tl)
            x = np.concatenate([q, qd])
            iu = min(i, g.u_samples.shape[0] - 1)
            u = g.u_samples[iu].copy()
            u[:NJ] = qdd[3:]
            im = int(np.clip(np.searchsorted(g.mode_starts, tl + 1e-12) - 1,
                             0, len(g.mode_sequence) - 1))
            mode = g.mode_sequence[im][0]
        else:
            # touchdown is late: coast at the stored end rates (zero
            # acceleration demand) so the swing foot keeps descending
            # while the joint rates hold consistent with the pose ramp
            x = g.x_samples[-1].copy()
            x[:NQ] += (tl - T) * x[NQ:]
            u = g.u_samples[-1].copy()
            u[:NJ] = 0.0
            mode = g.mode_sequence[-1][0]
        if k % 2:
            x = relabel_state(x)
            u = relabel_input(u)
            mode = relabel_mode(mode)
        x[0] += self.x_offset + k * g.displacement
        return x, u, mode

    def reference_accel(self, t: float) -> np.ndarray:
        """Full-pose spline acceleration at absolute time t."""
        k, tl = self._local(t)
        if tl <= self.gait.step_duration:
            _, _, qdd, _ = self._spline(max(tl, 0.0))
            qdd = qdd.copy()
        else:
            qdd = np.zeros(NQ)
        if k % 2:
            qdd[3], qdd[4], qdd[5], qdd[6] = qdd[5], qdd[6], qdd[3], qdd[4]
        return qdd

    def torque(self, x, t: float) -> np.ndarray:
        """Stored feedforward plus joint PD, clipped to actuator limits."""
        x = np.asarray(x, float)
        x_ref, u_ref, mode = self.reference(t)
        tau = recover_torques(self.model, x_ref, u_ref, mode)
        tau = (tau + self.kp * (x_ref[3:3 + NJ] - x[3:3 + NJ])
               + self.kd * (x_ref[NQ + 3:] - x[NQ + 3:]))
        lim = self.model.limits
        return np.clip(tau, lim.tau_min, lim.tau_max)

    def servo_torque(self, plant) -> np.ndarray:
        """Contact-consistent tracking torque for the given plant.

        Runs the plant's inverse dynamics on reference accelerations
        plus an acceleration-space PD, with the stored force split
        resolving any closed-chain indeterminacy, so the tracking error
        obeys a linear second-order decay whenever the demand is
        feasible.  The solve conditions on the feet that are pinned AND
        in stance per the reference: a pinned foot the reference
        already swings is treated as released, so the torque is
        consistent with the dynamics that hold once the plant drops it
        (which the lifting demand makes happen within the step).

        In single stance the demand is the four actuated joints; the
        base is the zero dynamics and follows.  Double stance leaves
        the closed chain exactly three degrees of freedom, so there the
        demand is the base pose instead: that pins down the whole
        configuration (the joints follow the loop closure), and it
        actively discharges whatever base error the previous stance
        phase accumulated before the next one starts.
        """
        x_ref, u_ref, mode_ref = self.reference(plant.t)
        pinned = plant.mode
        cond = ContactMode(pinned.left and mode_ref.left,
                           pinned.right and mode_ref.right)
        if cond.n_contacts == 2:
            qdd_ref = self.reference_accel(plant.t)
            fix = (self.kp_base * (x_ref[:3] - plant.x[:3])
                   + self.kd_base * (x_ref[NQ:NQ + 3] - plant.x[NQ:NQ + 3]))
            # forward position is a gauge freedom: chasing it would fight
            # the event-resynchronized phase, so only damp its rate.
            # Height and pitch stay stiff; discharging the pitch the
            # single-stance flow leaks is what keeps the strike timing,
            # and with it the whole cycle, from drifting.  Cap the
            # correction so a post-impact error cannot demand tension on
            # the foot that just landed.
            fix[0] = self.kd_base * (x_ref[NQ] - plant.x[NQ])
            a = qdd_ref[:3] + np.clip(fix, -3.0, 3.0)
            coords = (0, 1, 2)
        else:
            a = (u_ref[:NJ] + self.kp * (x_ref[3:3 + NJ] - plant.x[3:3 + NJ])
                 + self.kd * (x_ref[NQ + 3:] - plant.x[NQ + 3:]))
            coords = (3, 4, 5, 6)
        tau = plant.inverse_dynamics(a, coords=coords,
                                     forces_ref=u_ref[NJ:].reshape(NF, 2),
                                     mode=cond)
        lim = self.model.limits
        return np.clip(tau, lim.tau_min, lim.tau_max)


@dataclass
class ReplayLog:
    """Plant rollout of a stored gait: per-step series plus a summary."""
    t: np.ndarray                # (n,)
    x: np.ndarray                # (n, 14) state after each physics step
    tau: np.ndarray              # (n, 4)
    events: list
    summary: dict


def replay_gait(model: RobotModel, gait: HzdGait, cycles: int = 1,
                config: Optional[SimConfig] = None, exact: bool = True,
                kp: Optional[float] = None,
                kd: Optional[float] = None) -> ReplayLog:
    """Re-simulate a stored gait in the physics plant for whole cycles.

    With ``exact`` the actuated joints are servoed onto the stored
    trajectories through the plant's contact-consistent inverse dynamics
    (the idealized-tracking rollout the acceptance bounds refer to);
    otherwise the torque is the stored feedforward plus joint PD.  The
    rollout runs until the touchdown closing the last requested cycle,
    with a 25% time margin; ``summary["closed"]`` reports whether every
    exchange arrived.  Net base displacement and mean velocity are
    measured at the closing touchdown, and ``return_error`` is the
    largest deviation of the closing state from the cycle start shifted
    by the accumulated displacement.
    """
    cfg = SimConfig() if config is None else config
    if kp is None:
        kp = 400.0 if exact else 300.0
    if kd is None:
        kd = 40.0 if exact else 15.0
    playback = GaitPlayback(model, gait, kp=kp, kd=kd)
    # the cycle start is the post-reset state, where every foot of the
    # (relabeled) landing set is pinned; a swing foot among them releases
    # as soon as its reference lifts, mirroring the steady-state exchange
    pinned = {1 - f for f in _landing_feet(gait.mode_sequence)}
    plant = Plant(model, cfg, x0=gait.x_samples[0],
                  contacts=(0 in pinned, 1 in pinned))
    dt = cfg.physics_step
    steps_needed = 2 * int(cycles)
    n_max = int(np.ceil(1.25 * steps_needed * gait.step_duration / dt)) + 1

    rows_t, rows_x, rows_tau = [], [], []
    events: list = []
    t_close = None
    x_close = None
    for _ in range(n_max):
        if exact:
            tau = playback.servo_torque(plant)
        else:
            tau = playback.torque(plant.x, plant.t)
        x, ev = plant.step(tau, dt=dt)
        playback.observe(ev)
        events.extend(ev)
        rows_t.append(plant.t)
        rows_x.append(x)
        rows_tau.append(tau)
        if playback.step_index >= steps_needed:
            t_close, x_close = plant.t, x
            break
        if plant.fallen or plant.fault:
            break

    x0 = gait.x_samples[0]
    closed = t_close is not None
    x_last = x_close if closed else rows_x[-1]
    t_last = t_close if closed else rows_t[-1]
    expected = x0.copy()
    expected[0] += playback.step_index * gait.displacement
    summary = {
        "closed": closed,
        "cycles": int(cycles),
        "steps_completed": playback.step_index,
        "duration": float(t_last),
        "net_displacement": float(x_last[0] - x0[0]),
        "mean_velocity": float((x_last[0] - x0[0]) / t_last),
        "return_error": float(np.max(np.abs(x_last - expected))),
        "fell": plant.fallen,
        "fault": plant.fault,
        "slipped": plant.slipped,
        "touchdowns": sum(1 for e in events if e.kind == "touchdown"),
    }
    return ReplayLog(t=np.asarray(rows_t), x=np.asarray(rows_x),
                     tau=np.asarray(rows_tau), events=events,
                     summary=summary)


def builtin_gait(name: str) -> HzdGait:
    """Load one of the gaits shipped with the package."""
    root = resources.files("wbmpc").joinpath("data/gaits")
    ref = root.joinpath(f"{name}.json")
    if not ref.is_file():
        have = sorted(p.name[:-5] for p in root.iterdir()
                      if p.name.endswith(".json"))
        raise GaitSynthError(f"no packaged gait {name!r} (have {have})")
    with resources.as_file(ref) as path:
        return load_gait(path)
