"""Ground-truth hybrid simulator plus the joint-level controller.

The plant integrates the rigid-contact dynamics at a fixed physics step,
localizes touchdowns by bisection, applies the velocity reset, releases a
foot whenever its constraint would pull, and reports slip, falls, joint
limit excursions and numerical faults as a time-ordered event log.

The low-level side runs at a fixed rate: feed-forward torques interpolated
from the latest usable plan snapshot, a joint PD correction toward the
planned joint trajectory, and a smoothed Coulomb/viscous friction
compensation term, clamped to the actuator limits.

``run_episode`` wires both to a planner in a single deterministic loop
(planner invoked every k ticks), so identical scenarios reproduce
bitwise-identical logs; wall-clock timings are reported separately.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import null_space as _null_space

from .dynamics import chain_of, foot_heights, foot_kinematics, impulse_map, \
    kinetic_energy, mass_and_bias
from .gaits import named_pattern
from .model import ContactMode, NF, NJ, NQ, NX, RobotModel, \
    default_model, load_model, nominal_stance
from .mpc import MpcController, PlanSnapshot, controller_from_config, \
    interpolate_plan
from .references import HzdRefGenerator, load_gait


class PlantError(RuntimeError):
    pass


EVENT_KINDS = ("touchdown", "liftoff", "slip", "fall", "limit_violation",
               "fault")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SimConfig:
    """Physics and low-level controller parameters."""
    physics_step: float = 1e-3          # s
    low_level_rate: float = 1000.0      # Hz
    event_tol: float = 1e-6             # m, touchdown localization
    kp_joint: np.ndarray = 80.0         # N*m/rad, scalar or per joint
    kd_joint: np.ndarray = 4.0          # N*m*s/rad
    coulomb: float = 0.0                # N*m friction compensation level
    viscous: float = 0.0                # N*m*s/rad
    smoothing: float = 0.1              # rad/s, Coulomb smoothing width
    friction_mu: float = 0.6            # plant-side cone for slip reporting
    contact_kd: float = 20.0            # 1/s constraint velocity damping
    fall_pitch: float = 1.0             # rad
    fall_height: float = 0.3            # m
    stop_on_slip: bool = False

    def __post_init__(self):
        if self.physics_step <= 0 or self.low_level_rate <= 0:
            raise PlantError("physics step and control rate must be positive")
        if self.physics_step > 1.0 / self.low_level_rate + 1e-12:
            raise PlantError("physics step exceeds the low-level period")
        if self.event_tol <= 0 or self.smoothing <= 0:
            raise PlantError("event tolerance and smoothing must be positive")
        if self.friction_mu <= 0:
            raise PlantError("plant friction coefficient must be positive")
        for name in ("kp_joint", "kd_joint"):
            v = np.broadcast_to(np.asarray(getattr(self, name), float),
                                (NJ,)).copy()
            if (v < 0).any():
                raise PlantError("PD gains must be nonnegative")
            object.__setattr__(self, name, v)
        if min(self.coulomb, self.viscous, self.contact_kd) < 0:
            raise PlantError("friction and damping parameters must be "
                             "nonnegative")

    @staticmethod
    def from_dict(data: dict) -> "SimConfig":
        allowed = {"physics_step", "low_level_rate", "event_tol", "kp_joint",
                   "kd_joint", "coulomb", "viscous", "smoothing",
                   "friction_mu", "contact_kd", "fall_pitch", "fall_height",
                   "stop_on_slip"}
        unknown = set(data) - allowed
        if unknown:
            raise PlantError(f"unknown sim config keys {sorted(unknown)}")
        return SimConfig(**data)


@dataclass(frozen=True)
class Disturbance:
    """External force at the base origin over a time window."""
    start: float
    duration: float
    force: np.ndarray                   # (2,) N

    def __post_init__(self):
        if self.duration <= 0:
            raise PlantError("disturbance duration must be positive")
        f = np.asarray(self.force, float)
        if f.shape != (2,) or not np.all(np.isfinite(f)):
            raise PlantError("disturbance force must be a finite 2-vector")
        object.__setattr__(self, "force", f)

    def active(self, t: float) -> bool:
        return self.start <= t < self.start + self.duration

    @staticmethod
    def from_dict(data: dict) -> "Disturbance":
        return Disturbance(float(data["start"]), float(data["duration"]),
                           np.asarray(data["force"], float))


@dataclass(frozen=True)
class SimEvent:
    kind: str
    time: float
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise PlantError(f"unknown event kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "time": self.time, **self.payload}


# ---------------------------------------------------------------------------
# the plant


class Plant:
    """Rigid-contact simulator with event detection.

    Contact is a bilateral constraint per stance foot (position anchored
    through critically damped stabilization of the constraint) that is
    released the moment its normal force would turn tensile.  Touchdown of
    an airborne foot is localized by bisection to the event tolerance and
    resolved with the plastic-impact velocity reset.
    """

    def __init__(self, model: RobotModel, config: Optional[SimConfig] = None,
                 x0=None, contacts=(True, True), t0: float = 0.0):
        self.model = model
        self.cfg = SimConfig() if config is None else config
        self._chain = chain_of(model)
        self.x = np.array(nominal_stance(model) if x0 is None else x0,
                          float)
        if self.x.shape != (NX,):
            raise PlantError("initial state must have dimension 14")
        self.t = float(t0)
        self.contacts = [bool(c) for c in contacts]
        self.anchors = np.zeros((NF, 2))
        for f in range(NF):
            if self.contacts[f]:
                p, _ = foot_kinematics(model, self.x, f)
                self.anchors[f] = (float(p[0]), 0.0)
        # touchdown detection is armed only after the foot clears a small
        # band above the ground, so a foot released at height zero does not
        # chatter between liftoff and touchdown
        self._armed = [not c for c in self.contacts]
        self._limit_flags = np.zeros(NJ, bool)
        self.last_forces = np.zeros((NF, 2))
        self.fallen = False
        self.fault = False
        self.slipped = False

    @property
    def mode(self) -> ContactMode:
        return ContactMode(self.contacts[0], self.contacts[1])

    # -- constrained dynamics -------------------------------------------------

    def _dyn(self, x, tau, f_ext, mode: ContactMode):
        """One dynamics evaluation: (xdot, stance forces, kinematics).

        Assembles the contact KKT system from a single kinematics pass.
        The constraint right-hand side folds in critically damped
        stabilization of each stance foot toward its anchor, so constraint
        drift from integration error decays instead of accumulating.  A
        singular system is reported as NaN state rates rather than an
        exception; the post-step checks turn that into a fault event.
        """
        q, qd = x[:NQ], x[NQ:]
        d, h, kin = mass_and_bias(self._chain, q, qd)
        rhs = self._chain.b_map @ tau - h
        if f_ext is not None:
            rhs[:2] += f_ext
        feet = mode.stance_feet
        n = NQ + 2 * len(feet)
        kkt = np.zeros((n, n))
        kkt[:NQ, :NQ] = d
        full = np.zeros(n)
        full[:NQ] = rhs
        kd = self.cfg.contact_kd
        kp = (0.5 * kd) ** 2
        for i, f in enumerate(feet):
            jf = kin.foot_jac[f]
            r = slice(NQ + 2 * i, NQ + 2 * i + 2)
            kkt[:NQ, r] = -jf.T
            kkt[r, :NQ] = jf
            full[r] = (-kin.foot_vp[f] - kd * (jf @ qd)
                       - kp * (kin.foot_p[f] - self.anchors[f]))
        try:
            sol = np.linalg.solve(kkt, full)
        except np.linalg.LinAlgError:
            sol = np.full(n, np.nan)
        return np.concatenate([qd, sol[:NQ]]), sol[NQ:], kin

    def inverse_dynamics(self, a, coords=(3, 4, 5, 6), f_ext=None,
                         forces_ref=None,
                         mode: Optional[ContactMode] = None) -> np.ndarray:
        """Torque realizing accelerations of the selected coordinates.

        Contact-consistent computed torque: the dynamics and the
        anchor-stabilized constraint rows (the same right-hand side the
        forward dynamics uses) are hard constraints, and the demanded
        accelerations of the ``coords`` generalized coordinates (the
        actuated joints by default) are matched as closely as the
        contact geometry permits, exactly whenever they are feasible.
        Any direction still free after that (one internal-force
        direction in double stance with a joint demand, for instance)
        is resolved toward ``forces_ref`` (per-foot tangential and
        normal force, zero when omitted), so a replayed trajectory
        reproduces its stored force split instead of an arbitrary one.
        Demanding the base coordinates ``(0, 1, 2)`` in double stance
        pins down the full pose, since the closed chain leaves exactly
        three degrees of freedom there.

        ``mode`` conditions the solve on a different stance set than the
        plant currently pins (it must be a subset of the pinned feet):
        a controller that knows a pinned foot is about to lift can
        compute torque for the post-release dynamics, and the release
        then happens inside the same step.  Returns the unclipped torque
        vector; a degenerate contact geometry yields NaNs (callers see
        the fault through the forward dynamics).
        """
        a = np.asarray(a, float)
        coords = tuple(int(c) for c in coords)
        if a.shape != (len(coords),):
            raise PlantError("demand and coordinate selection disagree")
        if any(c < 0 or c >= NQ for c in coords):
            raise PlantError("coordinate index out of range")
        q, qd = self.x[:NQ], self.x[NQ:]
        d, h, kin = mass_and_bias(self._chain, q, qd)
        feet = (self.mode if mode is None else mode).stance_feet
        if any(not self.contacts[f] for f in feet):
            raise PlantError("cannot condition torque on an unpinned foot")
        nc = 2 * len(feet)
        n = NQ + NJ + nc                # unknowns: qdd, tau, lambda
        con = np.zeros((NQ + nc, n))
        rhs = np.zeros(NQ + nc)
        con[:NQ, :NQ] = d
        con[:NQ, NQ:NQ + NJ] = -self._chain.b_map
        rhs[:NQ] = -h
        if f_ext is not None:
            rhs[:2] += np.asarray(f_ext, float)
        kd = self.cfg.contact_kd
        kp = (0.5 * kd) ** 2
        lam_ref = np.zeros(nc)
        for i, f in enumerate(feet):
            jf = kin.foot_jac[f]
            con[:NQ, NQ + NJ + 2 * i:NQ + NJ + 2 * i + 2] = -jf.T
            con[NQ + 2 * i:NQ + 2 * i + 2, :NQ] = jf
            rhs[NQ + 2 * i:NQ + 2 * i + 2] = (
                -kin.foot_vp[f] - kd * (jf @ qd)
                - kp * (kin.foot_p[f] - self.anchors[f]))
            if forces_ref is not None:
                lam_ref[2 * i:2 * i + 2] = np.asarray(forces_ref,
                                                      float)[f]
        try:
            # the constraints are square in (qdd, lambda) for a fixed
            # torque, so their null space has exactly the four actuation
            # directions; project the acceleration demand onto it, then
            # settle any leftover closed-chain indeterminacy by forces
            base = np.linalg.lstsq(con, rhs, rcond=None)[0]
            null = _null_space(con)
            m1 = null[list(coords), :]
            z = np.linalg.lstsq(m1, a - base[list(coords)], rcond=None)[0]
            n2 = _null_space(m1)
            if n2.shape[1]:
                m2 = null[NQ + NJ:, :] @ n2
                r2 = lam_ref - base[NQ + NJ:] - null[NQ + NJ:, :] @ z
                z = z + n2 @ np.linalg.lstsq(m2, r2, rcond=None)[0]
        except np.linalg.LinAlgError:
            return np.full(NJ, np.nan)
        sol = base + null @ z
        return sol[NQ:NQ + NJ]

    def _rk4(self, x, tau, f_ext, dt, mode: ContactMode, k1=None):
        if k1 is None:
            k1, _, _ = self._dyn(x, tau, f_ext, mode)
        k2, _, _ = self._dyn(x + 0.5 * dt * k1, tau, f_ext, mode)
        k3, _, _ = self._dyn(x + 0.5 * dt * k2, tau, f_ext, mode)
        k4, _, _ = self._dyn(x + dt * k3, tau, f_ext, mode)
        return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    # -- stepping -------------------------------------------------------------

    def step(self, tau, f_ext=None, dt: Optional[float] = None):
        """One physics step; returns (state copy, events this step)."""
        if self.fallen or self.fault:
            return self.x.copy(), []
        dt = self.cfg.physics_step if dt is None else float(dt)
        if dt > self.cfg.physics_step + 1e-12:
            raise PlantError("dt must not exceed the physics step")
        tau = np.asarray(tau, float)
        if tau.shape != (NJ,):
            raise PlantError("tau must have dimension 4")
        f_ext = None if f_ext is None else np.asarray(f_ext, float)
        events: list[SimEvent] = []
        self._advance(dt, tau, f_ext, events, depth=0)
        self._post_checks(events)
        return self.x.copy(), events

    def _advance(self, dt, tau, f_ext, events, depth, hold=False):
        if dt <= 1e-12:
            return
        if depth > 8:
            self.fault = True
            events.append(SimEvent("fault", self.t,
                                   {"reason": "contact event cascade"}))
            return
        mode = self.mode
        k1, lam, kin = self._dyn(self.x, tau, f_ext, mode)

        # the remainder of a tick after an impact keeps its pins: the held
        # torque predates the new contact, so a tensile demand there says
        # nothing until the controller has seen the touchdown
        released = False
        if not hold:
            for i, f in enumerate(mode.stance_feet):
                if lam[2 * i + 1] < 0.0:
                    self.contacts[f] = False
                    self._armed[f] = False
                    events.append(SimEvent("liftoff", self.t, {
                        "foot": f, "normal_force": float(lam[2 * i + 1])}))
                    released = True
        if released:
            self._advance(dt, tau, f_ext, events, depth + 1)
            return

        forces = np.zeros((NF, 2))
        for i, f in enumerate(mode.stance_feet):
            ft, fn = float(lam[2 * i]), float(lam[2 * i + 1])
            forces[f] = (ft, fn)
            if fn > 0.0 and abs(ft) > self.cfg.friction_mu * fn:
                self.slipped = True
                events.append(SimEvent("slip", self.t, {
                    "foot": f,
                    "margin": self.cfg.friction_mu * fn - abs(ft)}))
        self.last_forces = forces

        x_new = self._rk4(self.x, tau, f_ext, dt, mode, k1=k1)

        hit = None
        swing = mode.swing_feet
        heights1 = foot_heights(self.model, x_new[:NQ]) if swing else None
        for f in swing:
            h0 = float(kin.foot_p[f][1])
            if not self._armed[f]:
                if heights1[f] > 10.0 * self.cfg.event_tol:
                    self._armed[f] = True
                continue
            if h0 > 0.0 >= heights1[f]:
                s = self._bisect_touchdown(f, tau, f_ext, dt, mode, k1)
                if hit is None or s < hit[0]:
                    hit = (s, f)
            elif h0 <= 0.0 and heights1[f] <= h0:
                hit = (0.0, f)              # started at/below ground, sinking

        if hit is None:
            self.x = x_new
            self.t += dt
            return

        s, foot = hit
        if s > 0.0:
            self.x = self._rk4(self.x, tau, f_ext, s, mode, k1=k1)
            self.t += s
        post = ContactMode(self.contacts[0] or foot == 0,
                           self.contacts[1] or foot == 1)
        x_post, impulse = impulse_map(self.model, self.x, post)
        slot = post.stance_feet.index(foot)
        p, _ = foot_kinematics(self.model, x_post, foot)
        self.contacts[foot] = True
        self.anchors[foot] = (float(p[0]), 0.0)
        self._armed[foot] = False
        events.append(SimEvent("touchdown", self.t, {
            "foot": foot,
            "impulse": [float(impulse[2 * slot]),
                        float(impulse[2 * slot + 1])],
            "height": float(foot_heights(self.model, self.x[:NQ])[foot])}))
        self.x = x_post
        self._advance(dt - s, tau, f_ext, events, depth + 1, hold=True)

    def _bisect_touchdown(self, foot, tau, f_ext, dt, mode, k1):
        lo, hi = 0.0, dt
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            x_mid = self._rk4(self.x, tau, f_ext, mid, mode, k1=k1)
            h_mid = float(foot_heights(self.model, x_mid[:NQ])[foot])
            if h_mid > 0.0:
                lo = mid
            else:
                hi = mid
                if abs(h_mid) <= self.cfg.event_tol:
                    break
            if hi - lo < 1e-15:
                break
        return hi

    def _post_checks(self, events):
        if self.fault:
            return
        # 0.5 * 50 * |qd|^2 overestimates kinetic energy (the largest
        # mass-matrix eigenvalue for this chain stays below 24), so the
        # exact energy needs evaluating only when that bound is breached
        qd_sq = float(self.x[NQ:] @ self.x[NQ:])
        if not np.all(np.isfinite(self.x)) or (
                25.0 * qd_sq > 1e6
                and kinetic_energy(self.model, self.x) > 1e6):
            self.fault = True
            events.append(SimEvent("fault", self.t,
                                   {"reason": "integration blow-up"}))
            return
        q = self.x[:NQ]
        if not self.fallen and (abs(q[2]) > self.cfg.fall_pitch
                                or q[1] < self.cfg.fall_height):
            self.fallen = True
            events.append(SimEvent("fall", self.t, {
                "pitch": float(q[2]), "height": float(q[1])}))
        lim = self.model.limits
        qj, qdj = q[3:], self.x[NQ + 3:]
        viol = ((qj > lim.q_max + 1e-9) | (qj < lim.q_min - 1e-9)
                | (np.abs(qdj) > lim.qd_max + 1e-9))
        for j in np.flatnonzero(viol & ~self._limit_flags):
            events.append(SimEvent("limit_violation", self.t, {
                "joint": int(j), "q": float(qj[j]), "qd": float(qdj[j])}))
        self._limit_flags = viol


# ---------------------------------------------------------------------------
# low-level torque


def friction_compensation(qd_j, config: SimConfig) -> np.ndarray:
    """Smoothed Coulomb plus viscous feed-forward term."""
    qd_j = np.asarray(qd_j, float)
    return (config.coulomb * np.tanh(qd_j / config.smoothing)
            + config.viscous * qd_j)


def low_level_torque(model: RobotModel, snap: PlanSnapshot, x, t: float,
                     config: SimConfig) -> np.ndarray:
    """Feed-forward + PD-toward-plan + friction compensation, clamped."""
    x = np.asarray(x, float)
    x_plan, _, tau_ff = interpolate_plan(model, snap, t)
    tau = (tau_ff
           + config.kp_joint * (x_plan[3:3 + NJ] - x[3:3 + NJ])
           + config.kd_joint * (x_plan[NQ + 3:] - x[NQ + 3:])
           + friction_compensation(x[NQ + 3:], config))
    return np.clip(tau, model.limits.tau_min, model.limits.tau_max)


def gait_tracking_torque(model: RobotModel, refgen: HzdRefGenerator, x,
                         t: float, config: SimConfig) -> np.ndarray:
    """Pure joint PD onto the stored gait outputs (no planner in the loop)."""
    x = np.asarray(x, float)
    y, yd = refgen.targets_at(t)
    tau = (config.kp_joint * (y - x[3:3 + NJ])
           + config.kd_joint * (yd - x[NQ + 3:])
           + friction_compensation(x[NQ + 3:], config))
    return np.clip(tau, model.limits.tau_min, model.limits.tau_max)


class PlanConsumer:
    """Feed-forward source implementing the last-good fallback contract.

    Usable snapshots replace the active plan.  Flagged snapshots leave it
    in place; once more than ``n_fail`` arrive consecutively the query
    time freezes, so the commanded feed-forward holds constant instead of
    tracking a stale trajectory.  Queries are clamped to the active
    snapshot's validity interval.
    """

    def __init__(self, n_fail: Optional[int] = None):
        self.n_fail = MpcController.N_FAIL if n_fail is None else int(n_fail)
        self.snapshot: Optional[PlanSnapshot] = None
        self.bad_streak = 0
        self.frozen_at: Optional[float] = None

    def offer(self, snap: PlanSnapshot) -> None:
        if snap.ok:
            self.snapshot = snap
            self.bad_streak = 0
            self.frozen_at = None
            return
        self.bad_streak += 1
        if self.bad_streak > self.n_fail and self.frozen_at is None \
                and self.snapshot is not None:
            self.frozen_at = float(snap.stamp)

    def query_time(self, t: float) -> float:
        if self.snapshot is None:
            raise PlantError("no usable plan has been published yet")
        t_q = t if self.frozen_at is None else min(t, self.frozen_at)
        return float(np.clip(t_q, self.snapshot.stamp, self.snapshot.t_end))

    def torque(self, model: RobotModel, x, t: float,
               config: SimConfig) -> np.ndarray:
        return low_level_torque(model, self.snapshot, x,
                                self.query_time(t), config)


# ---------------------------------------------------------------------------
# scenarios and episodes


def _default_gait_dir() -> Path:
    return Path(str(resources.files("wbmpc.data"))) / "gaits"


def load_scenario(src) -> tuple[dict, Optional[Path]]:
    """Parse and validate a scenario/v1 document (dict or file path)."""
    base = None
    if isinstance(src, (str, Path)):
        path = Path(src)
        if not path.exists():
            raise FileNotFoundError(f"scenario file {path} does not exist")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise PlantError(f"scenario file {path} is not valid JSON: {e}")
        base = path.parent
    else:
        data = dict(src)
    if data.get("schema") != "scenario/v1":
        raise PlantError(
            f"unsupported scenario schema {data.get('schema')!r} "
            "(expected 'scenario/v1')")
    mode = data.get("mode", "mpc")
    if mode not in ("mpc", "hzd_pd"):
        raise PlantError(f"unknown scenario mode {mode!r}")
    if float(data.get("t_end", 5.0)) <= 0:
        raise PlantError("t_end must be positive")
    if mode == "hzd_pd" and not data.get("gait_file"):
        raise PlantError("hzd_pd scenarios need a gait_file")
    for d in data.get("disturbances", []):
        Disturbance.from_dict(d)
    return data, base


def _resolve(path_str: str, base: Optional[Path]) -> Path:
    p = Path(path_str)
    if not p.is_absolute() and base is not None:
        p = base / p
    return p


@dataclass
class EpisodeLog:
    """Per-tick time series, ordered events and the episode summary."""
    t: np.ndarray
    q: np.ndarray                       # (n, 7)
    qd: np.ndarray                      # (n, 7)
    tau: np.ndarray                     # (n, 4)
    forces: np.ndarray                  # (n, 4) per foot (tangential, normal)
    plan_age: np.ndarray                # (n,) seconds since active plan stamp
    plan_ok: np.ndarray                 # (n,) bool
    events: list
    summary: dict

    CSV_HEADER = ("t,base_x,base_z,pitch,q_lh,q_lk,q_rh,q_rk,"
                  "vx,vz,pitch_rate,qd_lh,qd_lk,qd_rh,qd_rk,"
                  "tau_lh,tau_lk,tau_rh,tau_rk,"
                  "lam_lt,lam_ln,lam_rt,lam_rn,plan_age,plan_ok")

    def write(self, out_dir) -> dict:
        """Write episode.csv, events.json and summary.json; returns paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table = np.column_stack([
            self.t, self.q, self.qd, self.tau, self.forces,
            self.plan_age, self.plan_ok.astype(float)])
        csv_path = out / "episode.csv"
        np.savetxt(csv_path, table, delimiter=",", fmt="%.10g",
                   header=self.CSV_HEADER, comments="")
        events_path = out / "events.json"
        events_path.write_text(json.dumps(
            [e.to_dict() for e in self.events], indent=1))
        summary_path = out / "summary.json"
        summary_path.write_text(json.dumps(self.summary, indent=1))
        return {"csv": str(csv_path), "events": str(events_path),
                "summary": str(summary_path)}


def _active_force(disturbances, t: float):
    f = np.zeros(2)
    hit = False
    for d in disturbances:
        if d.active(t):
            f += d.force
            hit = True
    return f if hit else None


def run_episode(scenario, out_dir=None) -> EpisodeLog:
    """Closed loop of planner, low-level control and physics.

    Deterministic: the planner runs synchronously every ``replan_period``
    of simulated time, so identical scenarios yield identical logs; the
    wall-clock cost of planning and physics is reported separately in
    ``summary["timings"]`` and never feeds back into the loop.
    """
    data, base = load_scenario(scenario)
    model = (load_model(_resolve(data["model"], base))
             if data.get("model") else default_model())
    cfg = SimConfig.from_dict(data.get("sim", {}))
    mode = data.get("mode", "mpc")
    t_end = float(data.get("t_end", 5.0))
    llc_dt = 1.0 / cfg.low_level_rate
    n_sub = max(1, round(llc_dt / cfg.physics_step))
    replan_period = float(data.get("replan_period", 0.03))
    k_replan = max(1, round(replan_period / llc_dt))

    profile = sorted(data.get("command_profile", []),
                     key=lambda e: float(e.get("t", 0.0)))
    disturbances = [Disturbance.from_dict(d)
                    for d in data.get("disturbances", [])]

    ctrl = None
    refgen = None
    consumer = None
    if mode == "mpc":
        ccfg = data.get("controller") or {}
        if isinstance(ccfg, str):
            ccfg = json.loads(_resolve(ccfg, base).read_text())
        else:
            ccfg = dict(ccfg)
            ccfg.setdefault("schema", "controller-config/v1")
        if data.get("pattern") and "pattern" not in ccfg:
            ccfg["pattern"] = data["pattern"]
        if data.get("gait_file") and not ccfg.get("gait_file"):
            ccfg["gait_file"] = data["gait_file"]
        ctrl = controller_from_config(
            model, ccfg, gait_dir=base if base is not None
            else _default_gait_dir())
        consumer = PlanConsumer()
    else:
        gait = load_gait(_resolve(data["gait_file"], base))
        refgen = HzdRefGenerator(model, gait,
                                 anchor=float(data.get("anchor", 0.0)))

    x0 = (np.asarray(data["x0"], float) if data.get("x0")
          else nominal_stance(model))
    plant = Plant(model, cfg, x0=x0, contacts=(True, True))

    n_ticks = max(1, round(t_end / llc_dt))
    rows_t, rows_q, rows_qd = [], [], []
    rows_tau, rows_lam, rows_age, rows_ok = [], [], [], []
    events: list[SimEvent] = []
    next_cmd = 0
    solve_times, iters_hist, fail_count, replan_count = [], [], 0, 0
    planner_wall = 0.0
    sim_wall = 0.0
    wall0 = time.perf_counter()

    for k in range(n_ticks):
        t = k * llc_dt
        if ctrl is not None and k % k_replan == 0:
            while next_cmd < len(profile) \
                    and float(profile[next_cmd].get("t", 0.0)) <= t + 1e-12:
                e = profile[next_cmd]
                ctrl.set_command(type(ctrl.command)(
                    vx=float(e.get("vx", 0.0)),
                    base_height=float(e.get("base_height", 0.68)),
                    pitch=float(e.get("pitch", 0.0))))
                next_cmd += 1
            w = time.perf_counter()
            snap = ctrl.replan(plant.x, t)
            planner_wall += time.perf_counter() - w
            consumer.offer(snap)
            replan_count += 1
            solve_times.append(snap.solve_time)
            iters_hist.append(snap.iterations)
            if not snap.ok:
                fail_count += 1

        if ctrl is None:
            tau = gait_tracking_torque(model, refgen, plant.x, t, cfg)
        elif consumer.snapshot is not None:
            tau = consumer.torque(model, plant.x, t, cfg)
        else:
            tau = np.zeros(NJ)          # no usable plan yet: go limp

        f_ext = _active_force(disturbances, t)
        w = time.perf_counter()
        for _ in range(n_sub):
            _, evs = plant.step(tau, f_ext)
            events.extend(evs)
        sim_wall += time.perf_counter() - w

        rows_t.append(plant.t)
        rows_q.append(plant.x[:NQ].copy())
        rows_qd.append(plant.x[NQ:].copy())
        rows_tau.append(tau.copy())
        rows_lam.append(plant.last_forces.reshape(-1).copy())
        if consumer is None:
            rows_age.append(0.0)
            rows_ok.append(True)
        elif consumer.snapshot is not None:
            rows_age.append(t - consumer.snapshot.stamp)
            rows_ok.append(consumer.bad_streak == 0)
        else:
            rows_age.append(0.0)
            rows_ok.append(False)
        if plant.fallen or plant.fault:
            break
        if cfg.stop_on_slip and plant.slipped:
            break

    t_arr = np.asarray(rows_t)
    qd_arr = np.asarray(rows_qd)
    vx = qd_arr[:, 0]
    steady = t_arr >= min(2.0, 0.5 * t_arr[-1])
    summary = {
        "schema": "episode-summary/v1",
        "mode": mode,
        "seed": int(data.get("seed", 0)),
        "t_final": float(t_arr[-1]),
        "survived": bool(not plant.fallen and not plant.fault
                         and not (cfg.stop_on_slip and plant.slipped)
                         and t_arr[-1] >= t_end - 2 * llc_dt),
        "fell": bool(plant.fallen),
        "fault": bool(plant.fault),
        "slipped": bool(plant.slipped),
        "mean_vx": float(vx.mean()),
        "mean_vx_steady": float(vx[steady].mean()) if steady.any() else 0.0,
        "max_abs_pitch": float(np.abs(np.asarray(rows_q)[:, 2]).max()),
        "n_events": {kind: sum(1 for e in events if e.kind == kind)
                     for kind in EVENT_KINDS},
        "planner": {
            "replans": replan_count,
            "failures": fail_count,
            "mean_iterations": float(np.mean(iters_hist))
            if iters_hist else 0.0,
        },
        "timings": {
            "planner_wall_s": planner_wall,
            "sim_wall_s": sim_wall,
            "total_wall_s": time.perf_counter() - wall0,
            "mean_solve_s": float(np.mean(solve_times))
            if solve_times else 0.0,
            "max_solve_s": float(np.max(solve_times))
            if solve_times else 0.0,
        },
    }
    log = EpisodeLog(
        t=t_arr, q=np.asarray(rows_q), qd=qd_arr,
        tau=np.asarray(rows_tau), forces=np.asarray(rows_lam),
        plan_age=np.asarray(rows_age), plan_ok=np.asarray(rows_ok, bool),
        events=events, summary=summary)
    if out_dir is not None:
        log.write(out_dir)
    return log
