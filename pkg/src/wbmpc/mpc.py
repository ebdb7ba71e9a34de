"""Receding-horizon whole-body planner for the biped.

Assembles one shooting problem per replan from the contact schedule, the
reference targets and the constraint set, solves it with a bounded
number of Gauss-Newton iterations warm-started from the previous plan,
and publishes immutable plan snapshots that the low-level controller
interpolates into feed-forward torques.

Layout conventions repeated from the model: state rows are
[base x, base z, pitch, joints(4), base velocities(3), joint rates(4)];
input rows are [joint accelerations(4), left force(2), right force(2)]
with each foot force as (tangential, normal).
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from math import ceil
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dynamics import CS_STEP, chain_of, flow_jacobians, flow_masked, \
    mass_and_bias, mode_mask, recover_torques
from .gaits import GaitPattern, ScheduleWindow, named_pattern, stand_pattern, \
    window as schedule_window
from .model import NF, NJ, NQ, NU, NX, DOUBLE_STANCE, \
    RobotModel, State, nominal_stance
from .ocp import OcpSolution, RelaxedBarrier, ShootingProblem, \
    SolverSettings, care_solve, solve_ocp
from .references import Command, HeuristicRefGenerator, HzdGait, \
    HzdRefGenerator, ReferenceWindow, load_gait

N_RES = NX + NU + 6 * NF       # running cost rows per node
N_EQ = 3 * NF                  # foot equality rows per node
N_INEQ = 6 * NJ + 2 * NF       # barrier rows per node
TERMINAL_CHOICES = ("none", "heuristic", "hzd")


class MpcError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# weights and constraint parameters


def _sqrt_factor(mat: np.ndarray) -> np.ndarray:
    """F with F^T F = mat, for symmetric positive semidefinite mat."""
    mat = np.asarray(mat, float)
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    if w.min() < -1e-10 * max(1.0, w.max()):
        raise MpcError("weight matrix is not positive semidefinite")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


@dataclass(frozen=True)
class CostWeights:
    """Quadratic tracking weights of the running and terminal cost."""
    Q: np.ndarray                # (NX, NX) state weight, PSD
    R: np.ndarray                # (NU, NU) input weight, PD
    W: np.ndarray                # (6, 6) per-foot p/v/a weight, PSD
    rho: float = 1.0             # terminal scale

    def __post_init__(self):
        for name, m, n in (("Q", self.Q, NX), ("R", self.R, NU),
                           ("W", self.W, 6)):
            m = np.asarray(m, float)
            if m.shape != (n, n) or not np.allclose(m, m.T, atol=1e-12):
                raise MpcError(f"{name} must be a symmetric {n}x{n} matrix")
            object.__setattr__(self, name, m)
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise MpcError("R must be positive definite")
        if self.rho <= 0:
            raise MpcError("terminal scale must be positive")

    @staticmethod
    def from_diagonals(Q, R, W, rho: float = 1.0) -> "CostWeights":
        return CostWeights(np.diag(np.asarray(Q, float)),
                           np.diag(np.asarray(R, float)),
                           np.diag(np.asarray(W, float)), rho)


def default_weights(rho: float = 1.0) -> CostWeights:
    q = [1000.0, 1000.0, 800.0] + [50.0] * NJ + [10.0, 10.0, 5.0] + [1.0] * NJ
    r = [1e-3] * NJ + [1e-6] * (2 * NF)
    w = [200.0, 200.0, 10.0, 10.0, 1e-3, 1e-3]
    return CostWeights.from_diagonals(q, r, w, rho)


@dataclass(frozen=True)
class ConstraintSet:
    """Gains, limits and friction data of the path constraints."""
    kp_swing: float = 100.0
    kd_swing: float = 20.0
    kd_stance: float = 20.0
    friction_mu: float = 0.6
    normal: np.ndarray = None    # surface normal, unit
    q_min: np.ndarray = None     # actuated joint bounds
    q_max: np.ndarray = None
    qd_min: np.ndarray = None
    qd_max: np.ndarray = None
    tau_min: np.ndarray = None
    tau_max: np.ndarray = None

    def __post_init__(self):
        if min(self.kp_swing, self.kd_swing, self.kd_stance) < 0:
            raise MpcError("tracking gains must be nonnegative")
        if self.friction_mu <= 0:
            raise MpcError("friction coefficient must be positive")
        n = np.asarray([0.0, 1.0] if self.normal is None else self.normal,
                       float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise MpcError("surface normal must have unit norm")
        object.__setattr__(self, "normal", n)
        for name in ("q_min", "q_max", "qd_min", "qd_max",
                     "tau_min", "tau_max"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, float))

    def with_model_limits(self, model: RobotModel) -> "ConstraintSet":
        lim = model.limits
        return ConstraintSet(
            self.kp_swing, self.kd_swing, self.kd_stance, self.friction_mu,
            self.normal,
            lim.q_min if self.q_min is None else self.q_min,
            lim.q_max if self.q_max is None else self.q_max,
            lim.qd_min if self.qd_min is None else self.qd_min,
            lim.qd_max if self.qd_max is None else self.qd_max,
            lim.tau_min if self.tau_min is None else self.tau_min,
            lim.tau_max if self.tau_max is None else self.tau_max)


def default_barrier(mu: float = 1e-2, delta: float = 1e-3,
                    delta_cone: float = 5e-3) -> RelaxedBarrier:
    """Per-row relaxation: friction-cone rows get the wider margin."""
    deltas = np.concatenate([np.full(6 * NJ, delta),
                             np.full(2 * NF, delta_cone)])
    return RelaxedBarrier(mu=np.full(N_INEQ, mu), delta=deltas)


# ---------------------------------------------------------------------------
# node quantities shared by the stage cost and the terminal weight


def _node_outputs(chain, X, U, mask):
    """Torques and per-foot (p, v, a) for node states/inputs, complex-safe.

    One mass-matrix factorization serves the torque recovery and the foot
    accelerations.  Returns (tau (..., NJ), y (..., NF, 6)).
    """
    X = np.asarray(X)
    U = np.asarray(U)
    q, qd = X[..., :NQ], X[..., NQ:]
    d, h, kin = mass_and_bias(chain, q, qd)
    qdd_j = U[..., :NJ]
    lam = U[..., NJ:] * mask
    jfeet = np.concatenate([kin.foot_jac[0], kin.foot_jac[1]], axis=-2)
    d_bb = d[..., :3, :3]
    d_bj = d[..., :3, 3:]
    rhs = (-h[..., :3]
           - np.einsum("...ij,...j->...i", d_bj, qdd_j)
           + np.einsum("...ji,...j->...i", jfeet[..., :3], lam))
    qdd_b = np.linalg.solve(d_bb, rhs[..., None])[..., 0]
    tau = (np.einsum("...ij,...i->...j", d_bj, qdd_b)
           + np.einsum("...ij,...j->...i", d[..., 3:, 3:], qdd_j)
           + h[..., 3:]
           - np.einsum("...ji,...j->...i", jfeet[..., 3:], lam))
    batch = qdd_b.shape[:-1]
    qdd = np.concatenate([qdd_b, np.broadcast_to(qdd_j, batch + (NJ,))],
                         axis=-1)
    feet = []
    for f in range(NF):
        v = np.einsum("...ij,...j->...i", kin.foot_jac[f], qd)
        a = np.einsum("...ij,...j->...i", kin.foot_jac[f], qdd) \
            + kin.foot_vp[f]
        p = np.broadcast_to(kin.foot_p[f], a.shape)
        v = np.broadcast_to(v, a.shape)
        feet.append(np.concatenate([p, v, a], axis=-1))
    return tau, np.stack(feet, axis=-2)


def lqr_terminal_weight(model: RobotModel, weights: CostWeights,
                        x_eq: Optional[np.ndarray] = None) -> np.ndarray:
    """Riccati weight of the per-second stage cost around double stance.

    The Gauss-Newton quadratic of the running cost (state, input and foot
    tracking blocks) at the standing equilibrium feeds a continuous-time
    algebraic Riccati equation for the linearized flow, giving the
    quadratic value function used as terminal cost.
    """
    x_eq = nominal_stance(model) if x_eq is None else np.asarray(x_eq, float)
    u_eq = np.zeros(NU)
    weight = -model.total_mass * model.gravity[1]
    u_eq[NJ + 1] = u_eq[NJ + 3] = 0.5 * weight
    fx, fu = flow_jacobians(model, x_eq, u_eq, DOUBLE_STANCE)

    chain = chain_of(model)
    m2 = mode_mask(DOUBLE_STANCE)
    nz = NX + NU
    Xb = np.tile(x_eq.astype(complex), (nz, 1))
    Ub = np.tile(u_eq.astype(complex), (nz, 1))
    Xb[np.arange(NX), np.arange(NX)] += 1j * CS_STEP
    Ub[NX + np.arange(NU), np.arange(NU)] += 1j * CS_STEP
    _, y = _node_outputs(chain, Xb, Ub, m2)
    Jy = y.reshape(nz, -1).imag.T / CS_STEP       # (12, nz)
    W2 = np.kron(np.eye(NF), weights.W)
    Jx, Ju = Jy[:, :NX], Jy[:, NX:]
    Qxx = weights.Q + Jx.T @ W2 @ Jx
    Quu = weights.R + Ju.T @ W2 @ Ju
    Nxu = Jx.T @ W2 @ Ju
    return care_solve(fx, fu, Qxx, Quu, Nxu)


# ---------------------------------------------------------------------------
# horizon grid


@dataclass(frozen=True)
class HorizonGrid:
    """Node times and per-interval contact data over one planning window."""
    t_nodes: np.ndarray          # (N+1,)
    modes: tuple                 # N ContactMode entries
    masks: np.ndarray            # (N, 4) force-entry mask
    dts: np.ndarray              # (N,)

    @property
    def n_intervals(self) -> int:
        return len(self.modes)


def make_grid(window: ScheduleWindow, target_dt: float = 0.015) -> HorizonGrid:
    """Subdivide each schedule segment so transitions land on nodes."""
    if target_dt <= 0:
        raise MpcError("target_dt must be positive")
    nodes = [window.t0]
    modes = []
    for (a, b, mode) in window.segments:
        m = max(1, ceil((b - a) / target_dt - 1e-9))
        nodes.extend(a + (b - a) * (np.arange(1, m + 1) / m))
        modes.extend([mode] * m)
    t_nodes = np.asarray(nodes)
    masks = np.stack([mode_mask(m) for m in modes])
    return HorizonGrid(t_nodes, tuple(modes), masks, np.diff(t_nodes))


# ---------------------------------------------------------------------------
# problem assembly


@dataclass(frozen=True)
class AssembledProblem:
    shooting: ShootingProblem
    grid: HorizonGrid
    refs: ReferenceWindow
    window: ScheduleWindow
    terminal: str
    x_terminal: Optional[np.ndarray]


def build_problem(model: RobotModel, window: ScheduleWindow,
                  refs: ReferenceWindow, weights: CostWeights,
                  constraints: ConstraintSet, terminal: str,
                  x_measured, barrier: Optional[RelaxedBarrier] = None,
                  S_terminal: Optional[np.ndarray] = None,
                  grid: Optional[HorizonGrid] = None,
                  target_dt: float = 0.015) -> AssembledProblem:
    """Shooting problem for one horizon: tracking cost, scheduled dynamics,
    foot equality rows and barrier inequalities.

    ``terminal`` selects the cost on the final state: "none" drops it,
    "heuristic" and "hzd" add the Riccati quadratic around the final
    reference row (the reference family is the caller's choice).
    """
    if terminal not in TERMINAL_CHOICES:
        raise MpcError(f"terminal must be one of {TERMINAL_CHOICES}")
    grid = make_grid(window, target_dt) if grid is None else grid
    N = grid.n_intervals
    if refs.t_nodes.shape != grid.t_nodes.shape or \
            not np.allclose(refs.t_nodes, grid.t_nodes, atol=1e-9):
        raise MpcError("reference nodes do not match the schedule window")
    x_measured = np.asarray(
        x_measured.vector if isinstance(x_measured, State) else x_measured,
        float)
    constraints = constraints.with_model_limits(model)
    barrier = default_barrier() if barrier is None else barrier

    chain = chain_of(model)
    masks = grid.masks
    dts = grid.dts
    sq_dt = np.sqrt(dts)[:, None]
    Fq = _sqrt_factor(weights.Q)
    Fr = _sqrt_factor(weights.R)
    Fw = _sqrt_factor(weights.W)
    x_ref = refs.x_ref[:N]
    u_ref = refs.u_ref
    y_ref = np.concatenate([refs.foot_pos, refs.foot_vel, refs.foot_acc],
                           axis=-1)[:N]                     # (N, NF, 6)
    stance = masks[:, 1::2] > 0.5                           # (N, NF)
    kp, kdw, kds = (constraints.kp_swing, constraints.kd_swing,
                    constraints.kd_stance)
    mu_c = constraints.friction_mu
    nrm = constraints.normal
    cs = constraints

    def stage(X, U):
        tau, y = _node_outputs(chain, X, U, masks)
        p, v, a = y[..., 0:2], y[..., 2:4], y[..., 4:6]
        ey = y - y_ref
        r = np.concatenate([
            np.einsum("ij,...j->...i", Fq, X - x_ref),
            np.einsum("ij,...j->...i", Fr, U - u_ref),
            np.einsum("ij,...fj->...fi", Fw, ey).reshape(
                ey.shape[:-2] + (6 * NF,)),
        ], axis=-1) * sq_dt

        # stance: Cartesian stationarity a + kd v = 0 (third row masked);
        # swing: normal-direction PD tracking plus both force entries = 0
        track = np.einsum("j,...fj->...f",
                          nrm, (a - y_ref[..., 4:6]) + kdw * (v - y_ref[..., 2:4])
                          + kp * (p - y_ref[..., 0:2]))
        lam_t = U[..., NJ + 0::2]
        lam_n = U[..., NJ + 1::2]
        e = np.stack([
            np.where(stance, a[..., 0] + kds * v[..., 0], track),
            np.where(stance, a[..., 1] + kds * v[..., 1], lam_t),
            np.where(stance, 0.0 * lam_n, lam_n),
        ], axis=-1).reshape(a.shape[:-2] + (3 * NF,))

        q_j = X[..., 3:3 + NJ]
        qd_j = X[..., NQ + 3:]
        cone = np.stack([mu_c * lam_n + lam_t, mu_c * lam_n - lam_t],
                        axis=-1).reshape(lam_n.shape[:-1] + (2 * NF,))
        cone = np.where(np.repeat(stance, 2, axis=-1), cone, 1.0)
        g = np.concatenate([
            cs.tau_max - tau, tau - cs.tau_min,
            cs.q_max - q_j, q_j - cs.q_min,
            cs.qd_max - qd_j, qd_j - cs.qd_min,
            cone,
        ], axis=-1)
        return r, e, g

    dts_col = dts[:, None]

    def dyn(X, U):
        k1 = flow_masked(chain, X, U, masks)
        k2 = flow_masked(chain, X + 0.5 * dts_col * k1, U, masks)
        k3 = flow_masked(chain, X + 0.5 * dts_col * k2, U, masks)
        k4 = flow_masked(chain, X + dts_col * k3, U, masks)
        return X + (dts_col / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    if terminal == "none":
        term: Callable = lambda xN: xN[..., :0]
        n_res_T = 0
        x_terminal = None
    else:
        S = lqr_terminal_weight(model, weights) if S_terminal is None \
            else np.asarray(S_terminal, float)
        x_terminal = refs.x_ref[-1].copy()
        FT = np.linalg.cholesky(weights.rho * S
                                + 1e-12 * np.eye(NX))
        term = lambda xN: np.einsum("ij,...j->...i", FT.T, xN - x_terminal)
        n_res_T = NX

    # swing feet have no cone rows; their dt weight is zeroed as well
    g_weight = np.tile(dts[:, None], (1, N_INEQ))
    g_weight[:, 6 * NJ:] *= np.repeat(stance, 2, axis=-1)
    eq_mask = np.ones((N, N_EQ), bool)
    eq_mask[:, 2::3] = ~stance                   # stance third row disabled

    shooting = ShootingProblem(
        nx=NX, nu=NU, N=N, dynamics=dyn, stage=stage, terminal=term,
        n_res=N_RES, n_eq=N_EQ, n_ineq=N_INEQ, n_res_T=n_res_T,
        barrier=barrier, g_weight=g_weight, eq_mask=eq_mask,
        x_init=x_measured)
    return AssembledProblem(shooting, grid, refs, window, terminal,
                            x_terminal)


# ---------------------------------------------------------------------------
# plan snapshots


@dataclass(frozen=True)
class PlanSnapshot:
    """Immutable result of one replan, valid on [stamp, stamp + horizon]."""
    stamp: float
    t_nodes: np.ndarray          # (N+1,)
    X: np.ndarray                # (N+1, NX)
    U: np.ndarray                # (N, NU)
    window: ScheduleWindow
    refs: ReferenceWindow
    terminal: str
    ok: bool
    status: str
    iterations: int
    cost: float
    feas_inf: float
    kkt_inf: Optional[float]
    solve_time: float
    input_interp: str = "linear"

    @property
    def t_end(self) -> float:
        return float(self.t_nodes[-1])

    def diagnostics(self) -> dict:
        return {"stamp": self.stamp, "ok": self.ok, "status": self.status,
                "iterations": self.iterations, "cost": self.cost,
                "feas_inf": self.feas_inf, "kkt_inf": self.kkt_inf,
                "solve_time": self.solve_time}


_FAILED_PREFIXES = ("nan_at_iterate", "factorization_failure",
                    "line_search_failure", "stalled_infeasible")


def _solution_ok(sol: OcpSolution) -> bool:
    return (not sol.status.startswith(_FAILED_PREFIXES)
            and sol.feas_inf < 1e-3)


def interpolate_plan(model: RobotModel, snap: PlanSnapshot, t: float):
    """(x, u, feed-forward torque) at time t within the snapshot validity.

    States interpolate linearly between nodes; inputs follow the
    snapshot's configured scheme.  Torques are recovered from the
    interpolated pair under the scheduled contact mode.
    """
    t_nodes = snap.t_nodes
    if t < t_nodes[0] - 1e-9 or t > t_nodes[-1] + 1e-9:
        raise MpcError(
            f"query at t={t:.4f} outside plan validity "
            f"[{t_nodes[0]:.4f}, {t_nodes[-1]:.4f}]")
    N = len(snap.U)
    k = int(np.clip(np.searchsorted(t_nodes, t, side="right") - 1, 0, N - 1))
    dt = t_nodes[k + 1] - t_nodes[k]
    th = np.clip((t - t_nodes[k]) / dt, 0.0, 1.0)
    x = (1.0 - th) * snap.X[k] + th * snap.X[k + 1]
    if snap.input_interp == "zoh" or k == N - 1:
        u = snap.U[k].copy()
    else:
        u = (1.0 - th) * snap.U[k] + th * snap.U[k + 1]
    tau = recover_torques(model, x, u, snap.window.mode_at(t))
    return x, u, tau


def plan_cone_margins(snap: PlanSnapshot, friction_mu: float = 0.6):
    """Friction margin mu*lam_n - |lam_t| per node and stance foot (else nan)."""
    lam_t = snap.U[:, NJ + 0::2]
    lam_n = snap.U[:, NJ + 1::2]
    margins = friction_mu * lam_n - np.abs(lam_t)
    stance = np.array([[m.left, m.right] for m in _interval_modes(snap)])
    return np.where(stance, margins, np.nan)


def plan_torques(model: RobotModel, snap: PlanSnapshot) -> np.ndarray:
    """Recovered joint torques at every plan interval."""
    return np.stack([
        recover_torques(model, snap.X[k], snap.U[k], mode)
        for k, mode in enumerate(_interval_modes(snap))])


def _interval_modes(snap: PlanSnapshot):
    mids = 0.5 * (snap.t_nodes[:-1] + snap.t_nodes[1:])
    return [snap.window.mode_at(float(t)) for t in mids]


# ---------------------------------------------------------------------------
# the controller


def mpc_settings(max_iters: int = 10) -> SolverSettings:
    return SolverSettings(max_iters=max_iters, backend="riccati",
                          tol_step=1e-9, tol_kkt=1e-7, tol_feas=1e-7)


class MpcController:
    """Receding-horizon planner state: schedule, references, warm starts.

    One instance owns one solver loop.  ``replan`` publishes to an atomic
    latest-snapshot slot; command and schedule changes queue up and are
    drained at the start of the next replan.  N_FAIL is the consumer
    contract: after more than that many consecutive not-ok snapshots the
    low-level side freezes on its last good plan.
    """

    N_FAIL = 5

    def __init__(self, model: RobotModel, *, horizon: float = 1.0,
                 terminal: str = "heuristic",
                 command: Optional[Command] = None,
                 pattern: Optional[GaitPattern] = None,
                 gait: Optional[HzdGait] = None,
                 weights: Optional[CostWeights] = None,
                 constraints: Optional[ConstraintSet] = None,
                 barrier: Optional[RelaxedBarrier] = None,
                 anchor: float = 0.0, target_dt: float = 0.015,
                 max_iters: int = 10, input_interp: str = "linear",
                 swing_apex: float = 0.07):
        if terminal not in TERMINAL_CHOICES:
            raise MpcError(f"terminal must be one of {TERMINAL_CHOICES}")
        if terminal == "hzd" and gait is None:
            raise MpcError("terminal 'hzd' needs a gait file")
        if input_interp not in ("linear", "zoh"):
            raise MpcError("input_interp must be 'linear' or 'zoh'")
        if horizon <= 0:
            raise MpcError("horizon must be positive")
        self.model = model
        self.horizon = float(horizon)
        self.terminal = terminal
        self.gait = gait
        if pattern is None:
            pattern = gait.cycle_pattern() if gait is not None \
                else stand_pattern()
        self.pattern = pattern
        self.anchor = float(anchor)
        rho = {"none": 1.0, "heuristic": 1.0, "hzd": 10.0}[terminal]
        self.weights = default_weights(rho) if weights is None else weights
        self.constraints = (ConstraintSet() if constraints is None
                            else constraints).with_model_limits(model)
        self.barrier = default_barrier() if barrier is None else barrier
        self.target_dt = float(target_dt)
        self.max_iters = int(max_iters)
        self.input_interp = input_interp
        self.command = command or Command()
        self._heuristic = HeuristicRefGenerator(model, self.command,
                                                swing_apex=swing_apex)
        self._hzd = (HzdRefGenerator(model, gait, anchor=self.anchor)
                     if gait is not None else None)
        self._S_terminal = (lqr_terminal_weight(model, self.weights)
                            if terminal != "none" else None)
        self._snapshot: Optional[PlanSnapshot] = None
        self._multipliers: Optional[dict] = None
        self._last_query: Optional[tuple] = None
        self._pending: list = []
        self._lock = threading.Lock()

    # -- command/schedule entry points (drained per replan) -----------------

    def set_command(self, command: Command) -> None:
        with self._lock:
            self._pending.append(("command", command))

    def set_schedule(self, pattern: GaitPattern, anchor: float) -> None:
        with self._lock:
            self._pending.append(("schedule", (pattern, float(anchor))))

    @property
    def latest(self) -> Optional[PlanSnapshot]:
        return self._snapshot

    def _drain(self) -> bool:
        with self._lock:
            pending, self._pending = self._pending, []
        for kind, payload in pending:
            if kind == "command":
                self.command = payload
                self._heuristic.set_command(payload)
            else:
                self.pattern, self.anchor = payload
                if self._hzd is not None:
                    self._hzd.anchor = self.anchor
        return bool(pending)

    # -- assembly and solve --------------------------------------------------

    def references(self, grid: HorizonGrid, state: State) -> ReferenceWindow:
        if self.terminal == "hzd":
            return self._hzd.window(grid.t_nodes)
        return self._heuristic.window(grid.t_nodes, self.pattern,
                                      self.anchor, state)

    def assemble(self, x_measured, t_now: float):
        """Problem, grid, references and initial guess for one replan."""
        x = np.asarray(
            x_measured.vector if isinstance(x_measured, State) else
            x_measured, float)
        win = schedule_window(self.pattern, t_now, self.horizon, self.anchor)
        grid = make_grid(win, self.target_dt)
        refs = self.references(grid, State.from_vector(x))
        prob = build_problem(self.model, win, refs, self.weights,
                             self.constraints, self.terminal, x,
                             barrier=self.barrier,
                             S_terminal=self._S_terminal, grid=grid)
        X0, U0 = self._initial_guess(grid, refs, x)
        return prob, X0, U0

    def _initial_guess(self, grid: HorizonGrid, refs: ReferenceWindow,
                       x_measured: np.ndarray):
        prev = self._snapshot
        t_nodes = grid.t_nodes
        if prev is None or not prev.ok or t_nodes[0] > prev.t_end - 1e-9:
            X0 = refs.x_ref.copy()
            U0 = refs.u_ref.copy()
        else:
            X0 = np.stack([np.interp(t_nodes, prev.t_nodes, prev.X[:, j])
                           for j in range(NX)], axis=-1)
            t_u = t_nodes[:-1]
            idx = np.clip(np.searchsorted(prev.t_nodes, t_u, side="right")
                          - 1, 0, len(prev.U) - 1)
            U0 = prev.U[idx]
            tail = t_u > prev.t_end - 1e-9
            U0[tail] = refs.u_ref[tail]
        X0[0] = x_measured
        return X0, U0

    def replan(self, x_measured, t_now: float) -> PlanSnapshot:
        """Solve the horizon starting at t_now and publish the snapshot."""
        x = np.asarray(
            x_measured.vector if isinstance(x_measured, State) else
            x_measured, float)
        changed = self._drain()
        if (not changed and self._last_query is not None
                and self._last_query[0] == t_now
                and np.array_equal(self._last_query[1], x)):
            return self._snapshot
        prob, X0, U0 = self.assemble(x, t_now)
        t_wall = time.perf_counter()
        sol = solve_ocp(prob.shooting, X0, U0, mpc_settings(self.max_iters),
                        warm_multipliers=self._multipliers)
        solve_time = time.perf_counter() - t_wall
        snap = PlanSnapshot(
            stamp=float(t_now), t_nodes=prob.grid.t_nodes, X=sol.X, U=sol.U,
            window=prob.window, refs=prob.refs, terminal=self.terminal,
            ok=_solution_ok(sol), status=sol.status,
            iterations=sol.iterations, cost=sol.cost, feas_inf=sol.feas_inf,
            kkt_inf=sol.kkt_inf, solve_time=solve_time,
            input_interp=self.input_interp)
        if snap.ok:
            self._multipliers = sol.multipliers
        self._snapshot = snap
        self._last_query = (t_now, x.copy())
        return snap

    # -- configuration -------------------------------------------------------

    def config_dict(self) -> dict:
        return {
            "schema": "controller-config/v1",
            "horizon": self.horizon,
            "terminal": self.terminal,
            "target_dt": self.target_dt,
            "max_iters": self.max_iters,
            "input_interp": self.input_interp,
            "pattern": self.pattern.name,
            "weights": {
                "Q": np.diag(self.weights.Q).tolist(),
                "R": np.diag(self.weights.R).tolist(),
                "W": np.diag(self.weights.W).tolist(),
                "rho": self.weights.rho,
            },
            "gains": {
                "kp_swing": self.constraints.kp_swing,
                "kd_swing": self.constraints.kd_swing,
                "kd_stance": self.constraints.kd_stance,
            },
            "friction_mu": self.constraints.friction_mu,
            "barrier": {
                "mu": float(self.barrier.mu[0]),
                "delta": float(self.barrier.delta[0]),
                "delta_cone": float(self.barrier.delta[-1]),
            },
            "command": {
                "vx": self.command.vx,
                "base_height": self.command.base_height,
                "pitch": self.command.pitch,
            },
            "gait_file": None,
        }


def controller_from_config(model: RobotModel, config,
                           gait_dir: Optional[Path] = None) -> MpcController:
    """Build a controller from a controller-config/v1 JSON document."""
    if isinstance(config, (str, Path)):
        config = json.loads(Path(config).read_text())
    if config.get("schema") != "controller-config/v1":
        raise MpcError(f"unsupported config schema {config.get('schema')!r}")
    wcfg = config.get("weights", {})
    weights = CostWeights.from_diagonals(
        wcfg.get("Q", np.diag(default_weights().Q)),
        wcfg.get("R", np.diag(default_weights().R)),
        wcfg.get("W", np.diag(default_weights().W)),
        wcfg.get("rho", {"none": 1.0, "heuristic": 1.0,
                         "hzd": 10.0}[config.get("terminal", "heuristic")]),
    ) if wcfg else None
    gcfg = config.get("gains", {})
    constraints = ConstraintSet(
        kp_swing=gcfg.get("kp_swing", 100.0),
        kd_swing=gcfg.get("kd_swing", 20.0),
        kd_stance=gcfg.get("kd_stance", 20.0),
        friction_mu=config.get("friction_mu", 0.6))
    bcfg = config.get("barrier", {})
    barrier = default_barrier(bcfg.get("mu", 1e-2), bcfg.get("delta", 1e-3),
                              bcfg.get("delta_cone", 5e-3))
    gait = None
    if config.get("gait_file"):
        path = Path(config["gait_file"])
        if not path.is_absolute() and gait_dir is not None:
            path = Path(gait_dir) / path
        gait = load_gait(path)
    ccfg = config.get("command", {})
    command = Command(vx=ccfg.get("vx", 0.0),
                      base_height=ccfg.get("base_height", 0.68),
                      pitch=ccfg.get("pitch", 0.0))
    pattern = None
    if config.get("pattern"):
        pattern = named_pattern(config["pattern"])
    return MpcController(
        model, horizon=config.get("horizon", 1.0),
        terminal=config.get("terminal", "heuristic"),
        command=command, pattern=pattern, gait=gait, weights=weights,
        constraints=constraints, barrier=barrier,
        target_dt=config.get("target_dt", 0.015),
        max_iters=config.get("max_iters", 10),
        input_interp=config.get("input_interp", "linear"))
