"""Reference targets for the controller, per planning node.

Two reference families share one container:

- heuristic references are built from the commanded base motion and the
  contact schedule alone.  Stance feet hold their touchdown anchors,
  swing feet follow a smooth vertical bump between lift-off and the
  predicted touchdown point, and the contact force reference splits the
  robot weight evenly across the stance feet.
- stored-gait references sample a synthesized periodic gait (state,
  input and foot trajectories plus a Bezier encoding of the joint
  outputs) with left/right relabeling after every step.

Conventions: state rows are [base x, base z, pitch, joints(4), base
velocities(3), joint rates(4)]; input rows are [joint accelerations(4),
left foot force(2), right foot force(2)] with forces as (tangential,
normal).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import chain_of, flow_masked, foot_kinematics, kinematics, mode_mask
from .gaits import GaitPattern, ScheduleError, phase_at, window as schedule_window
from .model import (
    NF, NJ, NQ, NU, NX,
    ContactMode, ModelError, RobotModel, State,
    nominal_stance,
)


@dataclass(frozen=True)
class Command:
    """Operator command the references are built from.

    ``x_anchor`` pins the base x target to an absolute position (used when
    standing); without it the target re-anchors to the measured base on
    every replan.  ``gait`` optionally names the requested contact
    pattern; the controller decides when a switch takes effect.
    """
    vx: float = 0.0
    vz: float = 0.0
    pitch_rate: float = 0.0
    base_height: float = 0.68
    pitch: float = 0.0
    x_anchor: Optional[float] = None
    gait: Optional[str] = None
    max_speed: float = 1.0

    def __post_init__(self):
        vals = (self.vx, self.vz, self.pitch_rate, self.base_height,
                self.pitch, self.max_speed)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("command entries must be finite")
        if abs(self.vx) > self.max_speed:
            raise ValueError(
                f"commanded speed {self.vx} exceeds the {self.max_speed} m/s cap")


# ---------------------------------------------------------------------------
# swing profile


def bump(s, order: int = 0):
    """Degree-six bump 64 s^3 (1-s)^3 on [0, 1], peak 1 at s = 1/2.

    Value, slope and curvature all vanish at both endpoints, so a foot
    following it lifts off and touches down with zero vertical velocity
    and acceleration.  ``order`` selects the derivative in s.
    """
    s = np.asarray(s, float)
    if order == 0:
        return 64.0 * s ** 3 * (1.0 - s) ** 3
    if order == 1:
        return 192.0 * s ** 2 * (1.0 - s) ** 2 * (1.0 - 2.0 * s)
    if order == 2:
        return 384.0 * s * (1.0 - s) * (1.0 - 5.0 * s + 5.0 * s ** 2)
    raise ValueError("bump supports orders 0..2")


def _ease_cubic(s, order: int = 0):
    """Cubic ease 3 s^2 - 2 s^3: zero slope at both ends."""
    s = np.asarray(s, float)
    if order == 0:
        return s * s * (3.0 - 2.0 * s)
    if order == 1:
        return 6.0 * s * (1.0 - s)
    if order == 2:
        return 6.0 - 12.0 * s
    raise ValueError("ease supports orders 0..2")


def _ease_quintic(s, order: int = 0):
    """Quintic ease 10 s^3 - 15 s^4 + 6 s^5: zero slope and curvature at
    both ends."""
    s = np.asarray(s, float)
    if order == 0:
        return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)
    if order == 1:
        return 30.0 * s ** 2 * (1.0 - s) ** 2
    if order == 2:
        return 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s)
    raise ValueError("ease supports orders 0..2")


@dataclass(frozen=True)
class SwingProfile:
    """Foot trajectory from lift-off to touchdown.

    Horizontal motion follows a cubic ease (zero end velocity); vertical
    motion follows a quintic chord plus an apex-height bump, so it lifts
    off and touches down with zero velocity and acceleration, and on flat
    ground the peak clearance equals ``apex`` exactly (at mid swing).
    Outside [t0, t1] the profile clamps to its endpoints.
    """
    p0: tuple
    p1: tuple
    t0: float
    t1: float
    apex: float

    def _s(self, t):
        T = self.t1 - self.t0
        if T <= 0:
            raise ValueError("swing duration must be positive")
        return np.clip((np.asarray(t, float) - self.t0) / T, 0.0, 1.0), T

    def position(self, t):
        s, _ = self._s(t)
        x = self.p0[0] + (self.p1[0] - self.p0[0]) * _ease_cubic(s)
        z = (self.p0[1] + (self.p1[1] - self.p0[1]) * _ease_quintic(s)
             + self.apex * bump(s))
        return np.stack([x, z], axis=-1)

    def velocity(self, t):
        s, T = self._s(t)
        x = (self.p1[0] - self.p0[0]) * _ease_cubic(s, 1) / T
        z = ((self.p1[1] - self.p0[1]) * _ease_quintic(s, 1)
             + self.apex * bump(s, 1)) / T
        return np.stack([x, z], axis=-1)

    def acceleration(self, t):
        s, T = self._s(t)
        x = (self.p1[0] - self.p0[0]) * _ease_cubic(s, 2) / T ** 2
        z = ((self.p1[1] - self.p0[1]) * _ease_quintic(s, 2)
             + self.apex * bump(s, 2)) / T ** 2
        return np.stack([x, z], axis=-1)


# ---------------------------------------------------------------------------
# reference container


@dataclass
class ReferenceWindow:
    """Per-node targets over one planning horizon (N intervals, N+1 nodes)."""
    t_nodes: np.ndarray          # (N+1,)
    x_ref: np.ndarray            # (N+1, NX)
    u_ref: np.ndarray            # (N, NU)
    foot_pos: np.ndarray         # (N+1, NF, 2)
    foot_vel: np.ndarray         # (N+1, NF, 2)
    foot_acc: np.ndarray         # (N+1, NF, 2)

    def __post_init__(self):
        n1 = self.t_nodes.shape[0]
        if (self.x_ref.shape != (n1, NX) or self.u_ref.shape != (n1 - 1, NU)
                or self.foot_pos.shape != (n1, NF, 2)
                or self.foot_vel.shape != (n1, NF, 2)
                or self.foot_acc.shape != (n1, NF, 2)):
            raise ValueError("reference arrays have inconsistent shapes")


def _foot_in_contact(mode: ContactMode, foot: int) -> bool:
    return mode.left if foot == 0 else mode.right


def _foot_timeline(pattern: GaitPattern, anchor: float, foot: int,
                   t0: float, t1: float):
    """Merged (start, end, in_contact) intervals covering [t0, t1].

    The unroll extends past t1 so the contact interval following any
    swing inside the window is complete (touchdown targets need its
    midpoint) and the final node falls strictly inside a segment.
    """
    extra = 1.0 if pattern.is_static else 2.0 * pattern.cycle_period
    win = schedule_window(pattern, t0, (t1 - t0) + extra, anchor)
    merged = []
    for (a, b, mode) in win.segments:
        c = _foot_in_contact(mode, foot)
        if merged and merged[-1][2] == c:
            merged[-1] = (merged[-1][0], b, c)
        else:
            merged.append((a, b, c))
    return merged


# ---------------------------------------------------------------------------
# heuristic references


class HeuristicRefGenerator:
    """Builds references from the command and the contact schedule.

    Keeps a small per-foot memory across calls: the anchor point of the
    active stance phase (recorded at touchdown) and the lift-off time and
    position of the active swing phase.  The base x target is re-anchored
    to the measured base position on every call while stepping; a
    standing command with ``x_anchor`` holds an absolute pose instead.
    """

    def __init__(self, model: RobotModel, command: Command = Command(),
                 swing_apex: float = 0.07):
        self.model = model
        self.command = command
        self.swing_apex = float(swing_apex)
        self.reset()

    def reset(self):
        self._anchor = [None, None]
        self._lift = [None, None]
        self._was_contact = [None, None]

    def set_command(self, command: Command):
        self.command = command

    def _update_memory(self, t_now: float, state: State, mode: ContactMode):
        for foot in range(NF):
            contact = _foot_in_contact(mode, foot)
            p, _ = foot_kinematics(self.model, state.vector, foot)
            was = self._was_contact[foot]
            if was is None:
                if contact:
                    self._anchor[foot] = (float(p[0]), 0.0)
                else:
                    self._lift[foot] = (t_now, (float(p[0]), float(p[1])))
            elif was and not contact:
                self._lift[foot] = (t_now, (float(p[0]), float(p[1])))
            elif contact and not was:
                self._anchor[foot] = (float(p[0]), 0.0)
            self._was_contact[foot] = contact

    def window(self, t_nodes: np.ndarray, pattern: GaitPattern, anchor: float,
               state: State) -> ReferenceWindow:
        t_nodes = np.asarray(t_nodes, float)
        n1 = t_nodes.shape[0]
        N = n1 - 1
        t_now = float(t_nodes[0])
        cmd = self.command
        mode_now = phase_at(pattern, t_now, anchor).mode
        self._update_memory(t_now, state, mode_now)

        if cmd.x_anchor is not None:
            x0 = cmd.x_anchor
        else:
            x0 = float(state.q[0])

        def xref_x(t):
            return x0 + cmd.vx * (np.asarray(t, float) - t_now)

        x_nom = nominal_stance(self.model, hip_height=cmd.base_height)
        x_ref = np.zeros((n1, NX))
        x_ref[:, 0] = xref_x(t_nodes)
        x_ref[:, 1] = cmd.base_height
        x_ref[:, 2] = cmd.pitch
        x_ref[:, 3:3 + NJ] = x_nom[3:3 + NJ]
        x_ref[:, NQ] = cmd.vx
        x_ref[:, NQ + 1] = cmd.vz
        x_ref[:, NQ + 2] = cmd.pitch_rate

        foot_pos = np.zeros((n1, NF, 2))
        foot_vel = np.zeros((n1, NF, 2))
        foot_acc = np.zeros((n1, NF, 2))
        for foot in range(NF):
            intervals = _foot_timeline(pattern, anchor, foot, t_now,
                                       float(t_nodes[-1]))
            if intervals[0][2]:
                cur = self._anchor[foot]
                if cur is None:
                    p, _ = foot_kinematics(self.model, state.vector, foot)
                    cur = (float(p[0]), 0.0)
            else:
                cur = None  # resolved from the lift-off record below
            for i, (a, b, contact) in enumerate(intervals):
                sel = (t_nodes >= a - 1e-12) & (t_nodes < b - 1e-12)
                if contact:
                    if not sel.any():
                        continue
                    foot_pos[sel, foot, :] = np.asarray(cur)
                else:
                    # true touchdown is the interval end; the target sits
                    # below the reference hip at the middle of the coming
                    # contact interval
                    if i + 1 < len(intervals):
                        nc = intervals[i + 1]
                        t_mid = 0.5 * (nc[0] + nc[1])
                    else:
                        t_mid = b
                    p_td = (float(xref_x(t_mid)), 0.0)
                    if a <= t_now and self._lift[foot] is not None:
                        t_lift, p_lift = self._lift[foot]
                        # a replanning call can land exactly on touchdown
                        t_lift = min(t_lift, b - 1e-6)
                    else:
                        t_lift, p_lift = a, (cur if cur is not None
                                             else p_td)
                    prof = SwingProfile(p_lift, p_td, t_lift, b,
                                        self.swing_apex)
                    if sel.any():
                        ts = t_nodes[sel]
                        foot_pos[sel, foot, :] = prof.position(ts)
                        foot_vel[sel, foot, :] = prof.velocity(ts)
                        foot_acc[sel, foot, :] = prof.acceleration(ts)
                    cur = p_td

        u_ref = np.zeros((N, NU))
        mg = self.model.total_mass * (-self.model.gravity[1])
        for k in range(N):
            mode = phase_at(pattern, float(t_nodes[k]), anchor).mode
            n_st = len(mode.stance_feet)
            if n_st == 0:
                raise ScheduleError(
                    "heuristic references need at least one stance foot "
                    f"(flight at t={t_nodes[k]:.4f})")
            share = mg / n_st
            for foot in mode.stance_feet:
                u_ref[k, 4 + 2 * foot + 1] = share
        return ReferenceWindow(t_nodes, x_ref, u_ref, foot_pos, foot_vel,
                               foot_acc)


# ---------------------------------------------------------------------------
# Bezier curves


def bernstein_basis(degree: int, s, order: int = 0) -> np.ndarray:
    """Bernstein polynomials (or a derivative) evaluated at s: (..., degree+1)."""
    s = np.asarray(s, float)
    if order == 0:
        out = np.empty(s.shape + (degree + 1,))
        for i in range(degree + 1):
            out[..., i] = (math.comb(degree, i) * s ** i
                           * (1.0 - s) ** (degree - i))
        return out
    lower = bernstein_basis(degree - 1, s, order - 1)
    out = np.zeros(s.shape + (degree + 1,))
    out[..., :-1] -= degree * lower
    out[..., 1:] += degree * lower
    return out


def bezier_eval(alpha, s, order: int = 0):
    """Evaluate a Bezier curve (or derivative in s) with coefficients alpha.

    ``alpha`` has the coefficients on its last axis; s broadcasts against
    the remaining axes.  s must lie in [0, 1]: curves are only defined on
    the unit interval, callers clamp first.
    """
    alpha = np.asarray(alpha, float)
    s = np.asarray(s, float)
    if ((s < 0.0) | (s > 1.0)).any():
        raise ValueError("bezier parameter outside [0, 1]")
    basis = bernstein_basis(alpha.shape[-1] - 1, s, order)
    return np.einsum("...i,...i->...", basis, alpha) if alpha.ndim > 1 \
        else basis @ alpha


def fit_bezier(s_samples, y_samples, degree: int = 5,
               end_derivatives=None) -> np.ndarray:
    """Least-squares Bezier fit with pinned endpoints.

    The first and last coefficients are fixed to the first and last
    samples.  With ``end_derivatives=(d0, d1)`` (in s units) the second
    and second-to-last coefficients are fixed too, since the endpoint
    slope of a degree-M curve is M (alpha_1 - alpha_0) resp.
    M (alpha_M - alpha_{M-1}).  The remaining coefficients minimize the
    squared residual over the samples.
    """
    s = np.asarray(s_samples, float)
    y = np.asarray(y_samples, float)
    if s.ndim != 1 or y.shape != s.shape:
        raise ValueError("need matching 1-d sample arrays")
    M = degree
    alpha = np.zeros(M + 1)
    alpha[0] = y[0]
    alpha[M] = y[-1]
    fixed = [0, M]
    if end_derivatives is not None:
        d0, d1 = end_derivatives
        if M < 3:
            raise ValueError("derivative pins need degree >= 3")
        alpha[1] = alpha[0] + d0 / M
        alpha[M - 1] = alpha[M] - d1 / M
        fixed = [0, 1, M - 1, M]
    free = [i for i in range(M + 1) if i not in fixed]
    if free:
        basis = bernstein_basis(M, s)
        resid = y - basis[:, fixed] @ alpha[fixed]
        sol, *_ = np.linalg.lstsq(basis[:, free], resid, rcond=None)
        alpha[free] = sol
    return alpha


# ---------------------------------------------------------------------------
# left/right relabeling


_JP = slice(3, 7)       # joint positions in the state
_JV = slice(10, 14)     # joint rates


def relabel_state(x, displacement: float = 0.0) -> np.ndarray:
    """Swap the legs and shift the base forward by one step displacement."""
    x = np.asarray(x, float)
    out = x.copy()
    out[..., 3], out[..., 4] = x[..., 5], x[..., 6]
    out[..., 5], out[..., 6] = x[..., 3], x[..., 4]
    out[..., 10], out[..., 11] = x[..., 12], x[..., 13]
    out[..., 12], out[..., 13] = x[..., 10], x[..., 11]
    out[..., 0] = x[..., 0] + displacement
    return out


def relabel_input(u) -> np.ndarray:
    u = np.asarray(u, float)
    out = u.copy()
    out[..., 0], out[..., 1] = u[..., 2], u[..., 3]
    out[..., 2], out[..., 3] = u[..., 0], u[..., 1]
    out[..., 4:6], out[..., 6:8] = u[..., 6:8].copy(), u[..., 4:6].copy()
    return out


def relabel_mode(mode: ContactMode) -> ContactMode:
    return ContactMode(left=mode.right, right=mode.left)


# ---------------------------------------------------------------------------
# stored periodic gaits


@dataclass
class HzdGait:
    """One synthesized step of a periodic gait, plus its Bezier encoding.

    The stored samples cover a single step; the full cycle alternates the
    step with its left/right relabeling.  ``displacement`` is the base
    advance per step, so hybrid invariance reads: relabeling the final
    state (after the step's terminal transition) reproduces the initial
    state shifted by one displacement.  Joint angles are additionally
    encoded as one Bezier curve per joint per contact mode, indexed by
    the phase within that mode; reference generation evaluates these
    curves rather than the raw samples.
    """
    name: str
    step_duration: float
    displacement: float
    mode_sequence: list          # [(ContactMode, duration), ...]
    t_samples: np.ndarray        # (n,)
    x_samples: np.ndarray        # (n, NX)
    u_samples: np.ndarray        # (n-1, NU), piecewise constant
    bezier_degree: int
    bezier_joints: np.ndarray    # (n_modes, NJ, degree+1)
    meta: dict

    @property
    def nominal_speed(self) -> float:
        return self.displacement / self.step_duration

    @property
    def mode_starts(self) -> np.ndarray:
        """Start time of each mode within the step, plus the step end."""
        durs = [d for (_, d) in self.mode_sequence]
        return np.concatenate([[0.0], np.cumsum(durs)])

    def cycle_pattern(self) -> GaitPattern:
        """Contact pattern of the full two-step cycle."""
        modes = [m for (m, _) in self.mode_sequence]
        durs = [d for (_, d) in self.mode_sequence]
        modes += [relabel_mode(m) for m in modes]
        durs += durs
        return GaitPattern(self.name, tuple(modes), tuple(durs))

    def to_dict(self) -> dict:
        return {
            "schema": "hzd-gait/v1",
            "name": self.name,
            "step_duration": self.step_duration,
            "displacement": self.displacement,
            "nominal_speed": self.nominal_speed,
            "mode_sequence": [[m.mode_id, d] for (m, d) in self.mode_sequence],
            "t_samples": self.t_samples.tolist(),
            "x_samples": self.x_samples.tolist(),
            "u_samples": self.u_samples.tolist(),
            "bezier_degree": self.bezier_degree,
            "bezier_joints": self.bezier_joints.tolist(),
            "meta": self.meta,
        }

    @staticmethod
    def from_dict(data: dict) -> "HzdGait":
        if data.get("schema") != "hzd-gait/v1":
            raise ModelError(f"unsupported gait schema {data.get('schema')!r}")
        gait = HzdGait(
            name=str(data["name"]),
            step_duration=float(data["step_duration"]),
            displacement=float(data["displacement"]),
            mode_sequence=[(ContactMode.from_id(int(m)), float(d))
                           for (m, d) in data["mode_sequence"]],
            t_samples=np.asarray(data["t_samples"], float),
            x_samples=np.asarray(data["x_samples"], float),
            u_samples=np.asarray(data["u_samples"], float),
            bezier_degree=int(data["bezier_degree"]),
            bezier_joints=np.asarray(data["bezier_joints"], float),
            meta=dict(data.get("meta", {})),
        )
        n = gait.t_samples.shape[0]
        n_modes = len(gait.mode_sequence)
        if (gait.x_samples.shape != (n, NX)
                or gait.u_samples.shape != (n - 1, NU)
                or gait.bezier_joints.shape != (n_modes, NJ,
                                                gait.bezier_degree + 1)):
            raise ModelError("gait arrays have inconsistent shapes")
        if (gait.t_samples[0] != 0.0
                or abs(gait.t_samples[-1] - gait.step_duration) > 1e-9
                or (np.diff(gait.t_samples) <= 0).any()):
            raise ModelError("gait samples must cover [0, step_duration]")
        if abs(gait.mode_starts[-1] - gait.step_duration) > 1e-9:
            raise ModelError("mode durations do not sum to the step duration")
        stored = data.get("nominal_speed")
        if stored is not None and abs(stored - gait.nominal_speed) > 1e-9:
            raise ModelError("stored nominal_speed is inconsistent")
        return gait


def save_gait(gait: HzdGait, path) -> None:
    Path(path).write_text(json.dumps(gait.to_dict()))


def load_gait(path) -> HzdGait:
    return HzdGait.from_dict(json.loads(Path(path).read_text()))


class HzdRefGenerator:
    """References evaluated from a stored periodic gait.

    Step k occupies [anchor + k T, anchor + (k+1) T); odd steps are the
    left/right relabeling of the stored one, and the base x target
    accumulates one displacement per step on top of ``x_offset``.  Joint
    targets come from the Bezier encoding at the phase within the active
    mode, with velocities by the chain rule through the phase rate; base
    rows and inputs come from the stored samples; foot targets follow
    from the assembled references by forward kinematics.
    """

    def __init__(self, model: RobotModel, gait: HzdGait, anchor: float = 0.0,
                 x_offset: float = 0.0):
        self.model = model
        self.gait = gait
        self.anchor = float(anchor)
        self.x_offset = float(x_offset)
        self.clamp_count = 0

    def align(self, t: float, state: State) -> None:
        """Shift the base x target so the reference passes through the
        measured base position at time t."""
        ref = self._state_refs(np.asarray([t]))[0]
        self.x_offset += float(state.q[0]) - ref[0]

    def _clamped(self, phase: np.ndarray) -> np.ndarray:
        out_of_range = (phase < -1e-9) | (phase > 1.0 + 1e-9)
        self.clamp_count += int(np.count_nonzero(out_of_range))
        return np.clip(phase, 0.0, 1.0)

    def _decompose(self, t: np.ndarray):
        T = self.gait.step_duration
        rel = np.asarray(t, float) - self.anchor
        k = np.floor(rel / T + 1e-12).astype(int)
        t_local = np.clip(rel - k * T, 0.0, T)
        starts = self.gait.mode_starts
        idx = np.clip(np.searchsorted(starts, t_local + 1e-12) - 1, 0,
                      len(self.gait.mode_sequence) - 1)
        durs = np.asarray([d for (_, d) in self.gait.mode_sequence])
        phase = (t_local - starts[idx]) / durs[idx]
        return k, t_local, idx, self._clamped(phase), durs[idx]

    def joint_targets(self, mode_index: int, phase, odd_step: bool = False):
        """Joint position and velocity targets at a phase of one mode.

        This is the raw output map: callers tracking it directly (rather
        than through a planning window) may land slightly outside [0, 1]
        when an expected touchdown is late, so the phase is clamped and
        counted.  Returns (y, yd) with yd in rad/s.
        """
        g = self.gait
        phase = self._clamped(np.asarray(phase, float))
        alpha = g.bezier_joints[mode_index]
        dur = g.mode_sequence[mode_index][1]
        y = np.einsum("ji,...i->...j", alpha,
                      bernstein_basis(g.bezier_degree, phase))
        yd = np.einsum("ji,...i->...j", alpha,
                       bernstein_basis(g.bezier_degree, phase, order=1)) / dur
        if odd_step:
            y = y[..., [2, 3, 0, 1]]
            yd = yd[..., [2, 3, 0, 1]]
        return y, yd

    def targets_at(self, t: float):
        """Joint targets (y, yd) at an absolute time, relabeled per step."""
        k, _, idx, phase, _ = self._decompose(t)
        return self.joint_targets(int(idx), float(phase),
                                  odd_step=bool(int(k) % 2))

    def _state_refs(self, t: np.ndarray) -> np.ndarray:
        g = self.gait
        k, t_local, midx, phase, mdur = self._decompose(t)
        x_ref = np.zeros(t_local.shape + (NX,))
        for j in (0, 1, 2, NQ, NQ + 1, NQ + 2):
            x_ref[..., j] = np.interp(t_local, g.t_samples, g.x_samples[:, j])
        alpha = g.bezier_joints[midx]                # (..., NJ, M+1)
        basis0 = bernstein_basis(g.bezier_degree, phase)
        basis1 = bernstein_basis(g.bezier_degree, phase, order=1)
        x_ref[..., 3:3 + NJ] = np.einsum("...ji,...i->...j", alpha, basis0)
        x_ref[..., NQ + 3:] = (np.einsum("...ji,...i->...j", alpha, basis1)
                               / mdur[..., None])
        odd = (k % 2) != 0
        if odd.any():
            x_ref[odd] = relabel_state(x_ref[odd])
        x_ref[..., 0] += self.x_offset + k * g.displacement
        return x_ref

    def _input_refs(self, t: np.ndarray) -> np.ndarray:
        g = self.gait
        k, t_local, *_ = self._decompose(t)
        u_ref = np.empty(t_local.shape + (NU,))
        for i, tl in enumerate(t_local):
            idx = int(np.searchsorted(g.t_samples, tl + 1e-12) - 1)
            idx = min(max(idx, 0), g.u_samples.shape[0] - 1)
            u = g.u_samples[idx]
            u_ref[i] = relabel_input(u) if (k[i] % 2) else u
        return u_ref

    def mode_at(self, t: float) -> ContactMode:
        k, _, midx, _, _ = self._decompose(np.asarray([t]))
        mode = self.gait.mode_sequence[int(midx[0])][0]
        return relabel_mode(mode) if (int(k[0]) % 2) else mode

    def window(self, t_nodes: np.ndarray) -> ReferenceWindow:
        t_nodes = np.asarray(t_nodes, float)
        n1 = t_nodes.shape[0]
        x_ref = self._state_refs(t_nodes)
        u_ref = self._input_refs(t_nodes[:-1])
        # foot targets by forward kinematics of the assembled references;
        # the final node reuses the last interval's input for acceleration
        u_all = np.concatenate([u_ref, u_ref[-1:]], axis=0) if n1 > 1 \
            else np.zeros((1, NU))
        masks = np.stack([mode_mask(self.mode_at(float(t)))
                          for t in t_nodes])
        chain = chain_of(self.model)
        q, qd = x_ref[:, :NQ], x_ref[:, NQ:]
        kin = kinematics(chain, q, qd)
        xdot = flow_masked(chain, x_ref, u_all, masks)
        qdd = xdot[:, NQ:]
        pos = np.empty((n1, NF, 2))
        vel = np.empty((n1, NF, 2))
        acc = np.empty((n1, NF, 2))
        for f in range(NF):
            pos[:, f] = kin.foot_p[f]
            vel[:, f] = np.einsum("nij,nj->ni", kin.foot_jac[f], qd)
            acc[:, f] = (np.einsum("nij,nj->ni", kin.foot_jac[f], qdd)
                         + kin.foot_vp[f])
        return ReferenceWindow(t_nodes, x_ref, u_ref, pos, vel, acc)
