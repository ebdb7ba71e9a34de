"""Robot model description and loading for the planar five-link biped.

The robot is a floating-base planar kinematic tree: a torso with two
two-segment legs (thigh + calf) attached at a common hip axis, point feet
at the calf ends.  Generalized coordinates are

    q = [x_b, z_b, th_b, q_lh, q_lk, q_rh, q_rk]

where (x_b, z_b) is the hip-axis position in the world frame, th_b the
torso pitch (CCW positive), and the four joint angles are relative
rotations (left hip, left knee, right hip, right knee).  A joint angle of
zero leaves the segment pointing straight down along the parent axis;
positive angles rotate the distal end toward +x.  The ground is the line
z = 0 with inward normal (0, 1).

Models are loaded from versioned JSON parameter files (schema
"robot-model/v1").  Loaded models are immutable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

MODEL_SCHEMA = "robot-model/v1"

NQ = 7          # generalized coordinates
NJ = 4          # actuated joints
NX = 2 * NQ     # state dimension
NU = 8          # reparameterized input: 4 joint accelerations + 2x2 contact force
NF = 2          # feet

LINK_NAMES = ("torso", "left_thigh", "left_calf", "right_thigh", "right_calf")
JOINT_NAMES = ("left_hip", "left_knee", "right_hip", "right_knee")
FOOT_NAMES = ("left", "right")

_LINK_FIELDS = {"name", "mass", "com_offset", "inertia_zz", "length"}
_MODEL_FIELDS = {"schema", "name", "gravity", "links", "joint_topology",
                 "actuated_joints", "foot_offsets", "limits"}
_LIMIT_FIELDS = {"q_min", "q_max", "qd_min", "qd_max", "tau_min", "tau_max"}


class ModelError(ValueError):
    """Raised when a model file is malformed or violates its invariants."""


@dataclass(frozen=True)
class Link:
    name: str
    mass: float
    com_offset: np.ndarray      # (2,) in link frame
    inertia_zz: float           # about the com
    length: float               # proximal joint to distal joint / foot


@dataclass(frozen=True)
class JointLimits:
    q_min: np.ndarray
    q_max: np.ndarray
    qd_min: np.ndarray
    qd_max: np.ndarray
    tau_min: np.ndarray
    tau_max: np.ndarray


@dataclass(frozen=True)
class RobotModel:
    name: str
    gravity: np.ndarray                 # (2,)
    links: tuple[Link, ...]             # fixed order, see LINK_NAMES
    actuated_joints: tuple[int, ...]    # indices into q
    foot_offsets: np.ndarray            # (2, 2) distal point per calf, in calf frame
    limits: JointLimits
    # lazily built kinematic chain cache, set by wbmpc.dynamics
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def total_mass(self) -> float:
        return float(sum(l.mass for l in self.links))

    @property
    def leg_mass_fraction(self) -> float:
        leg = sum(l.mass for l in self.links[1:])
        return float(leg / self.total_mass)

    @property
    def thigh_length(self) -> float:
        return self.links[1].length

    @property
    def calf_length(self) -> float:
        return self.links[2].length


@dataclass(frozen=True)
class ContactMode:
    """Which feet are in stance.  mode_id is stable across serialization."""
    left: bool
    right: bool

    @property
    def mode_id(self) -> int:
        return (1 if self.left else 0) | (2 if self.right else 0)

    @property
    def stance_feet(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate((self.left, self.right)) if s)

    @property
    def swing_feet(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate((self.left, self.right)) if not s)

    @property
    def n_contacts(self) -> int:
        return int(self.left) + int(self.right)

    @staticmethod
    def from_id(mode_id: int) -> "ContactMode":
        if mode_id not in (0, 1, 2, 3):
            raise ValueError(f"invalid mode id {mode_id}")
        return ContactMode(bool(mode_id & 1), bool(mode_id & 2))

    def __str__(self) -> str:
        return {0: "flight", 1: "left-stance", 2: "right-stance", 3: "double-stance"}[self.mode_id]


FLIGHT = ContactMode(False, False)
LEFT_STANCE = ContactMode(True, False)
RIGHT_STANCE = ContactMode(False, True)
DOUBLE_STANCE = ContactMode(True, True)


@dataclass
class State:
    """Convenience container for the 14-dimensional state vector.

    Layout: x = [q (7), qd (7)] with q as documented in the module header.
    """
    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        if self.q.shape != (NQ,) or self.qd.shape != (NQ,):
            raise ValueError(f"state needs q and qd of shape ({NQ},)")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qd])

    @staticmethod
    def from_vector(x) -> "State":
        x = np.asarray(x, dtype=float)
        if x.shape != (NX,):
            raise ValueError(f"state vector must have dimension {NX}")
        return State(x[:NQ], x[NQ:])

    @property
    def base_pose(self) -> np.ndarray:
        return self.q[:3]

    @property
    def q_joints(self) -> np.ndarray:
        return self.q[3:]


@dataclass
class Input:
    """Reparameterized input u = [qdd_j (4), lam (4)].

    lam stacks the planar contact force per foot as (tangential, normal),
    left foot first.  Forces on swing feet must be zero.
    """
    qdd_j: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        self.qdd_j = np.asarray(self.qdd_j, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        if self.qdd_j.shape != (NJ,) or self.lam.shape != (NJ,):
            raise ValueError("input needs qdd_j and lam of shape (4,)")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.qdd_j, self.lam])

    @staticmethod
    def from_vector(u) -> "Input":
        u = np.asarray(u, dtype=float)
        if u.shape != (NU,):
            raise ValueError(f"input vector must have dimension {NU}")
        return Input(u[:NJ], u[NJ:])


def _require(cond: bool, msg: str):
    if not cond:
        raise ModelError(msg)


def model_from_dict(data: dict) -> RobotModel:
    """Build and validate a RobotModel from parsed robot-model/v1 JSON."""
    _require(isinstance(data, dict), "model file must contain a JSON object")
    unknown = set(data) - _MODEL_FIELDS
    _require(not unknown, f"unknown model fields: {sorted(unknown)}")
    _require(data.get("schema") == MODEL_SCHEMA,
             f"expected schema {MODEL_SCHEMA!r}, got {data.get('schema')!r}")
    _require(data.get("joint_topology") == "planar-5link-biped",
             "unsupported joint topology")

    links = []
    raw_links = data.get("links", [])
    _require(len(raw_links) == 5, "model needs exactly 5 links")
    for i, raw in enumerate(raw_links):
        unknown = set(raw) - _LINK_FIELDS
        _require(not unknown, f"unknown link fields: {sorted(unknown)}")
        _require(raw.get("name") == LINK_NAMES[i],
                 f"link {i} must be named {LINK_NAMES[i]!r}")
        mass = float(raw["mass"])
        izz = float(raw["inertia_zz"])
        length = float(raw["length"])
        com = np.asarray(raw["com_offset"], dtype=float)
        _require(mass > 0.0, f"link {raw['name']}: mass must be positive")
        _require(izz > 0.0, f"link {raw['name']}: inertia must be positive")
        _require(length > 0.0, f"link {raw['name']}: length must be positive")
        _require(com.shape == (2,) and np.all(np.isfinite(com)),
                 f"link {raw['name']}: com_offset must be a finite 2-vector")
        links.append(Link(raw["name"], mass, com, izz, length))

    gravity = np.asarray(data["gravity"], dtype=float)
    _require(gravity.shape == (2,) and np.all(np.isfinite(gravity)),
             "gravity must be a finite 2-vector")

    actuated = tuple(int(i) for i in data["actuated_joints"])
    _require(actuated == (3, 4, 5, 6), "actuated joints must be (3, 4, 5, 6)")

    foot_offsets = np.asarray(data["foot_offsets"], dtype=float)
    _require(foot_offsets.shape == (2, 2), "foot_offsets must be 2x2")

    raw_lim = data["limits"]
    unknown = set(raw_lim) - _LIMIT_FIELDS
    _require(not unknown, f"unknown limit fields: {sorted(unknown)}")
    lim = {}
    for key in _LIMIT_FIELDS:
        arr = np.asarray(raw_lim[key], dtype=float)
        _require(arr.shape == (NJ,) and np.all(np.isfinite(arr)),
                 f"limit {key} must be a finite 4-vector")
        lim[key] = arr
    limits = JointLimits(**lim)
    _require(np.all(limits.q_min < limits.q_max), "q_min must be < q_max")
    _require(np.all(limits.qd_min < limits.qd_max), "qd_min must be < qd_max")
    _require(np.all(limits.tau_min < 0.0) and np.all(limits.tau_max > 0.0),
             "torque limits must straddle zero")

    for arr in (*[l.com_offset for l in links], gravity, foot_offsets):
        arr.setflags(write=False)
    for arr in lim.values():
        arr.setflags(write=False)

    return RobotModel(
        name=str(data.get("name", "unnamed")),
        gravity=gravity,
        links=tuple(links),
        actuated_joints=actuated,
        foot_offsets=foot_offsets,
        limits=limits,
    )


def load_model(path) -> RobotModel:
    """Load a robot-model/v1 JSON file."""
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ModelError(f"model file {path} is not valid JSON: {e}") from e
    return model_from_dict(data)


def default_model() -> RobotModel:
    """The packaged default biped (21.6 kg, 0.40 m thigh, 0.38 m calf)."""
    with resources.files("wbmpc.data").joinpath("planar_biped_v1.json").open() as f:
        return model_from_dict(json.load(f))


def default_model_path() -> str:
    return str(resources.files("wbmpc.data").joinpath("planar_biped_v1.json"))


def lumped_mass_variant(model: RobotModel, residual_mass: float = 1e-3,
                        residual_inertia: float = 1e-6) -> RobotModel:
    """Move the leg mass and rotational inertia into the torso.

    Kinematics (lengths, foot offsets, limits) are kept, so the planner sees
    the same geometry but treats the legs as (nearly) massless.  Tiny residual
    link masses keep the mass matrix well conditioned.  The merged torso is
    the equivalent rigid body of the robot frozen at the nominal stance:
    same total mass, com at the combined com, rotational inertia with the
    parallel-axis terms about it.  Total mass and total com are preserved,
    so the standing equilibrium posture carries over unchanged.
    """
    torso = model.links[0]
    legs = model.links[1:]
    moved = [l.mass - residual_mass for l in legs]

    def rot(a):
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s], [s, c]])

    # leg link com positions relative to the hip, nominal stance posture
    hip, knee = leg_ik(model, 0.0, -0.68)
    r_th, r_ca = rot(hip), rot(hip + knee)
    th_com = r_th @ np.asarray(legs[0].com_offset)
    ca_com = (r_th @ np.array([0.0, -model.thigh_length])
              + r_ca @ np.asarray(legs[1].com_offset))
    leg_coms = [th_com, ca_com, th_com, ca_com]

    t_com = np.asarray(torso.com_offset, float)
    m_new = torso.mass + sum(moved)
    com_new = (torso.mass * t_com
               + sum(m * c for m, c in zip(moved, leg_coms))) / m_new
    izz = torso.inertia_zz + torso.mass * float((t_com - com_new) @ (t_com - com_new))
    for m, c, l in zip(moved, leg_coms, legs):
        izz += l.inertia_zz + m * float((c - com_new) @ (c - com_new))

    new_links = [replace(torso, mass=m_new, com_offset=com_new,
                         inertia_zz=izz)]
    for l in legs:
        new_links.append(replace(l, mass=residual_mass, inertia_zz=residual_inertia))
    return replace(model, name=model.name + "-lumped", links=tuple(new_links),
                   _cache={})


def leg_ik(model: RobotModel, dx: float, dz: float) -> tuple[float, float]:
    """Joint angles (hip, knee) placing a foot at offset (dx, dz) from the hip.

    Uses the knee-forward branch (knee angle negative).  dz must be negative
    (foot below hip) and the target within reach.
    """
    l1, l2 = model.thigh_length, model.calf_length
    r2 = dx * dx + dz * dz
    r = np.sqrt(r2)
    if not (abs(l1 - l2) + 1e-9 < r < l1 + l2 - 1e-9):
        raise ValueError(f"foot target at distance {r:.3f} out of reach")
    cos_int = (l1 * l1 + l2 * l2 - r2) / (2 * l1 * l2)
    knee = np.arccos(np.clip(cos_int, -1.0, 1.0)) - np.pi       # negative branch
    cos_g = (r2 + l1 * l1 - l2 * l2) / (2 * r * l1)
    gamma = np.arccos(np.clip(cos_g, -1.0, 1.0))
    direction = np.arctan2(dx, -dz)     # 0 when straight down, + toward +x
    hip = direction + gamma
    return float(hip), float(knee)


def nominal_stance(model: RobotModel, hip_height: float = 0.68,
                   foot_x: float = 0.0) -> np.ndarray:
    """Symmetric standing state: both feet at (foot_x, 0), hip right above."""
    hip, knee = leg_ik(model, 0.0, -hip_height)
    q = np.array([foot_x, hip_height, 0.0, hip, knee, hip, knee])
    return np.concatenate([q, np.zeros(NQ)])
