"""Floating-base rigid-body dynamics for the planar five-link biped.

Equations of motion in generalized coordinates q (dim 7):

    D(q) qdd + h(q, qd) = B tau + Jc(q)^T lam
    Jc(q) qdd + Jc_dot(q, qd) qd = 0          (stance feet pinned)

with D the mass matrix, h the Coriolis/centrifugal/gravity bias, B the
(constant) actuation map with zero rows for the unactuated base, Jc the
stacked translational Jacobian of the stance feet and lam the planar
contact forces (tangential, normal) per stance foot.

The control-oriented form re-parameterizes the input as
u = (qdd_j, lam): solving the base rows for the base acceleration gives

    qdd_b = D_bb^{-1} (-h_b - D_bj qdd_j + Jc_b^T lam)

which makes the state flow affine in u, and the joint rows recover the
torque, also affine in u.  Touchdowns map velocities through a rigid
impulsive contact: D (qd+ - qd-) = Jc'^T F with Jc' qd+ = 0.

Everything here broadcasts over leading batch dimensions and accepts
complex-valued states/inputs, so callers can differentiate any of these
maps with a complex step.  Closed-form expressions are used throughout;
for a point p = p_base + sum_k R(phi_k) c_k on the tree (each phi_k an
integer combination of angles) the Jacobian columns are R'(phi_k) c_k and
the velocity-product acceleration is -sum_k phidot_k^2 R(phi_k) c_k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (NJ, NQ, NU, NX, ContactMode, RobotModel)

GROUND_NORMAL = np.array([0.0, 1.0])


class DynamicsError(ValueError):
    """Raised on non-finite inputs or singular constraint systems."""


# --- kinematic chain -------------------------------------------------------

@dataclass(frozen=True)
class ChainPoint:
    """A material point on the tree: world position = base + sum R(phi_a) off."""
    terms: tuple[tuple[int, tuple[float, float]], ...]   # (angle index, offset)


@dataclass(frozen=True)
class Chain:
    """Precomputed structure of a planar floating-base kinematic tree.

    angle_rows maps generalized coordinates to absolute link angles
    (phi = angle_rows @ q); they are constant, so the angular Jacobian of
    every link is a constant row and the rotational part of the mass
    matrix is the constant matrix k_rot.
    """
    n_q: int
    angle_rows: np.ndarray              # (n_ang, n_q) constant 0/1 selectors
    com_points: tuple[ChainPoint, ...]  # one per link
    com_angles: tuple[int, ...]         # absolute angle index per link
    masses: np.ndarray                  # (n_links,)
    inertias: np.ndarray                # (n_links,)
    feet: tuple[ChainPoint, ...]        # contact points
    gravity: np.ndarray                 # (2,)
    k_rot: np.ndarray                   # (n_q, n_q)
    b_map: np.ndarray                   # (n_q, n_j) actuation matrix

    @staticmethod
    def build(n_q, angle_rows, com_points, com_angles, masses, inertias,
              feet, gravity, actuated) -> "Chain":
        angle_rows = np.asarray(angle_rows, float)
        masses = np.asarray(masses, float)
        inertias = np.asarray(inertias, float)
        k_rot = np.zeros((n_q, n_q))
        for izz, ai in zip(inertias, com_angles):
            row = angle_rows[ai]
            k_rot += izz * np.outer(row, row)
        b_map = np.zeros((n_q, len(actuated)))
        for col, j in enumerate(actuated):
            b_map[j, col] = 1.0
        for arr in (angle_rows, masses, inertias, k_rot, b_map):
            arr.setflags(write=False)
        return Chain(n_q, angle_rows, tuple(com_points), tuple(com_angles),
                     masses, inertias, tuple(feet), np.asarray(gravity, float),
                     k_rot, b_map)


def chain_of(model: RobotModel) -> Chain:
    """The five-link biped chain for a model (cached on the model)."""
    cached = model._cache.get("chain")
    if cached is not None:
        return cached
    t, lth, lca, rth, rca = model.links
    # absolute angles: torso, left thigh, left calf, right thigh, right calf
    rows = np.zeros((5, NQ))
    rows[0, 2] = 1.0
    rows[1, [2, 3]] = 1.0
    rows[2, [2, 3, 4]] = 1.0
    rows[3, [2, 5]] = 1.0
    rows[4, [2, 5, 6]] = 1.0
    d_th = (0.0, -lth.length)
    com_points = (
        ChainPoint(((0, tuple(t.com_offset)),)),
        ChainPoint(((1, tuple(lth.com_offset)),)),
        ChainPoint(((1, d_th), (2, tuple(lca.com_offset)))),
        ChainPoint(((3, tuple(rth.com_offset)),)),
        ChainPoint(((3, d_th), (4, tuple(rca.com_offset)))),
    )
    feet = (
        ChainPoint(((1, d_th), (2, tuple(model.foot_offsets[0])))),
        ChainPoint(((3, d_th), (4, tuple(model.foot_offsets[1])))),
    )
    chain = Chain.build(
        NQ, rows, com_points, (0, 1, 2, 3, 4),
        [l.mass for l in model.links], [l.inertia_zz for l in model.links],
        feet, model.gravity, model.actuated_joints)
    model._cache["chain"] = chain
    return chain


# --- batched kinematics ----------------------------------------------------

@dataclass
class Kinematics:
    """Batched positions/Jacobians/velocity-product terms for all points."""
    cos: np.ndarray          # (..., n_ang)
    sin: np.ndarray
    phidot: np.ndarray       # (..., n_ang)
    com_p: list              # per link: (..., 2)
    com_jac: list            # per link: (..., 2, n_q)
    com_vp: list             # per link: (..., 2)  (Jdot @ qd)
    foot_p: list
    foot_jac: list
    foot_vp: list


def _rot_apply(c, s, off):
    ox, oz = off
    return np.stack([c * ox - s * oz, s * ox + c * oz], axis=-1)


def _drot_apply(c, s, off):
    ox, oz = off
    return np.stack([-s * ox - c * oz, c * ox - s * oz], axis=-1)


def _point_eval(chain: Chain, point: ChainPoint, q, c, s, phidot):
    """Position, Jacobian and velocity-product acceleration of one point."""
    batch = q.shape[:-1]
    p = np.zeros(batch + (2,), dtype=q.dtype)
    p[..., 0] = q[..., 0]
    p[..., 1] = q[..., 1]
    jac = np.zeros(batch + (2, chain.n_q), dtype=q.dtype)
    jac[..., 0, 0] = 1.0
    jac[..., 1, 1] = 1.0
    vp = np.zeros(batch + (2,), dtype=q.dtype)
    for ai, off in point.terms:
        ca, sa = c[..., ai], s[..., ai]
        p += _rot_apply(ca, sa, off)
        dcol = _drot_apply(ca, sa, off)
        row = chain.angle_rows[ai]
        for k in np.nonzero(row)[0]:
            jac[..., :, k] += dcol
        vp += -(phidot[..., ai] ** 2)[..., None] * _rot_apply(ca, sa, off)
    return p, jac, vp


def kinematics(chain: Chain, q, qd) -> Kinematics:
    q = np.asarray(q)
    qd = np.asarray(qd)
    ang = q @ chain.angle_rows.T
    phidot = qd @ chain.angle_rows.T
    c, s = np.cos(ang), np.sin(ang)
    com_p, com_jac, com_vp = [], [], []
    for pt in chain.com_points:
        p, j, v = _point_eval(chain, pt, q, c, s, phidot)
        com_p.append(p); com_jac.append(j); com_vp.append(v)
    foot_p, foot_jac, foot_vp = [], [], []
    for pt in chain.feet:
        p, j, v = _point_eval(chain, pt, q, c, s, phidot)
        foot_p.append(p); foot_jac.append(j); foot_vp.append(v)
    return Kinematics(c, s, phidot, com_p, com_jac, com_vp,
                      foot_p, foot_jac, foot_vp)


def mass_and_bias(chain: Chain, q, qd, kin: Kinematics | None = None):
    """Mass matrix D and bias h (Coriolis + centrifugal + gravity).

    Newton's second law per link projected through the com Jacobians:
    D = k_rot + sum_i m_i J_i^T J_i and h = sum_i m_i J_i^T (vp_i - g);
    the planar rotational inertia contributes no velocity-product term.
    """
    if kin is None:
        kin = kinematics(chain, q, qd)
    batch = np.asarray(q).shape[:-1]
    d = np.zeros(batch + (chain.n_q, chain.n_q), dtype=np.result_type(q, qd))
    h = np.zeros(batch + (chain.n_q,), dtype=np.result_type(q, qd))
    d += chain.k_rot
    g = chain.gravity
    for m, jac, vp in zip(chain.masses, kin.com_jac, kin.com_vp):
        d += m * np.einsum("...ij,...ik->...jk", jac, jac)
        h += m * np.einsum("...ij,...i->...j", jac, vp - g)
    return d, h, kin


# --- dynamics terms --------------------------------------------------------

@dataclass
class DynamicsTerms:
    """All quantities of the contact-constrained equations of motion."""
    D: np.ndarray            # (7, 7)
    h: np.ndarray            # (7,)
    B: np.ndarray            # (7, 4)
    Jc: np.ndarray           # (2*nc, 7) stance feet, stacked left-then-right
    Jc_dot_qd: np.ndarray    # (2*nc,)
    mode: ContactMode

    @property
    def D_bb(self): return self.D[:3, :3]
    @property
    def D_bj(self): return self.D[:3, 3:]
    @property
    def D_jj(self): return self.D[3:, 3:]
    @property
    def h_b(self): return self.h[:3]
    @property
    def h_j(self): return self.h[3:]
    @property
    def Jc_b(self): return self.Jc[:, :3]
    @property
    def Jc_j(self): return self.Jc[:, 3:]


def _check_state(x):
    x = np.asarray(x, dtype=float)
    if x.shape != (NX,):
        raise DynamicsError(f"state must have dimension {NX}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DynamicsError("state contains non-finite entries")
    return x


def compute_terms(model: RobotModel, x, mode: ContactMode) -> DynamicsTerms:
    """Evaluate D, h, B and the stance-feet contact Jacobian terms at x."""
    x = _check_state(x)
    chain = chain_of(model)
    q, qd = x[:NQ], x[NQ:]
    d, h, kin = mass_and_bias(chain, q, qd)
    rows, drift = [], []
    for f in mode.stance_feet:
        rows.append(kin.foot_jac[f])
        drift.append(kin.foot_vp[f])
    if rows:
        jc = np.concatenate(rows, axis=0)
        jc_dot_qd = np.concatenate(drift, axis=0)
    else:
        jc = np.zeros((0, NQ))
        jc_dot_qd = np.zeros(0)
    return DynamicsTerms(d, h, chain.b_map.copy(), jc, jc_dot_qd, mode)


def constrained_forward_dynamics(model: RobotModel, x, tau, mode: ContactMode,
                                 stab: np.ndarray | None = None,
                                 external_force: np.ndarray | None = None):
    """Solve the contact-constrained dynamics for (qdd, lam) given torques.

    Solves the KKT system
        [D  -Jc^T] [qdd]   [B tau - h (+ J_base^T f_ext)]
        [Jc  0   ] [lam] = [-Jc_dot qd (+ stab)]
    where stab optionally replaces the zero right-hand side of the contact
    acceleration constraint (used by the simulator to damp constraint
    drift).  external_force is a planar force applied at the base origin.
    """
    x = _check_state(x)
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (NJ,):
        raise DynamicsError("tau must have dimension 4")
    terms = compute_terms(model, x, mode)
    qd = x[NQ:]
    rhs_top = terms.B @ tau - terms.h
    if external_force is not None:
        rhs_top = rhs_top.copy()
        rhs_top[:2] += np.asarray(external_force, dtype=float)
    nc2 = terms.Jc.shape[0]
    if nc2 == 0:
        qdd = np.linalg.solve(terms.D, rhs_top)
        return qdd, np.zeros(0)
    kkt = np.zeros((NQ + nc2, NQ + nc2))
    kkt[:NQ, :NQ] = terms.D
    kkt[:NQ, NQ:] = -terms.Jc.T
    kkt[NQ:, :NQ] = terms.Jc
    rhs = np.concatenate([rhs_top, -terms.Jc_dot_qd if stab is None
                          else -terms.Jc_dot_qd + stab])
    cond = np.linalg.cond(kkt)
    if not np.isfinite(cond) or cond > 1e12:
        raise DynamicsError(f"contact KKT system near singular (cond {cond:.2e})")
    sol = np.linalg.solve(kkt, rhs)
    return sol[:NQ], sol[NQ:]


# masks select which lambda components act, so one batched code path covers
# every contact mode (swing-foot forces are simply zeroed)
def mode_mask(mode: ContactMode) -> np.ndarray:
    m = np.zeros(4)
    if mode.left:
        m[0:2] = 1.0
    if mode.right:
        m[2:4] = 1.0
    return m


def flow_masked(chain: Chain, x, u, mask):
    """Reparameterized state flow, batched and complex-safe.

    x: (..., 14), u: (..., 8), mask: (..., 4) selecting active force entries.
    Returns xdot = [qd, qdd_b, qdd_j].
    """
    x = np.asarray(x)
    u = np.asarray(u)
    q, qd = x[..., :NQ], x[..., NQ:]
    qdd_j = u[..., :NJ]
    lam = u[..., NJ:] * mask
    d, h, kin = mass_and_bias(chain, q, qd)
    jfeet = np.concatenate([kin.foot_jac[0], kin.foot_jac[1]], axis=-2)
    d_bb = d[..., :3, :3]
    d_bj = d[..., :3, 3:]
    rhs = (-h[..., :3]
           - np.einsum("...ij,...j->...i", d_bj, qdd_j)
           + np.einsum("...ji,...j->...i", jfeet[..., :3], lam))
    qdd_b = np.linalg.solve(d_bb, rhs[..., None])[..., 0]
    batch = qdd_b.shape[:-1]
    qd = np.broadcast_to(qd, batch + (NQ,))
    qdd_j = np.broadcast_to(qdd_j, batch + (NJ,))
    return np.concatenate([qd, qdd_b, qdd_j], axis=-1)


def torques_masked(chain: Chain, x, u, mask):
    """Joint torques realizing the reparameterized input, batched/complex-safe."""
    x = np.asarray(x)
    u = np.asarray(u)
    q, qd = x[..., :NQ], x[..., NQ:]
    qdd_j = u[..., :NJ]
    lam = u[..., NJ:] * mask
    d, h, kin = mass_and_bias(chain, q, qd)
    jfeet = np.concatenate([kin.foot_jac[0], kin.foot_jac[1]], axis=-2)
    d_bb = d[..., :3, :3]
    d_bj = d[..., :3, 3:]
    rhs = (-h[..., :3]
           - np.einsum("...ij,...j->...i", d_bj, qdd_j)
           + np.einsum("...ji,...j->...i", jfeet[..., :3], lam))
    qdd_b = np.linalg.solve(d_bb, rhs[..., None])[..., 0]
    # joint rows: D_bj^T qdd_b + D_jj qdd_j + h_j - Jc_j^T lam = B_j tau = tau
    tau = (np.einsum("...ij,...i->...j", d_bj, qdd_b)
           + np.einsum("...ij,...j->...i", d[..., 3:, 3:], qdd_j)
           + h[..., 3:]
           - np.einsum("...ji,...j->...i", jfeet[..., 3:], lam))
    return tau


def rate_transform(q, qd):
    """Map generalized velocities to configuration rates.

    For the planar parameterization this is the identity; it exists as the
    hook where a non-trivial orientation parameterization would enter.
    """
    return qd


def reparam_flow(model: RobotModel, x, u, mode: ContactMode,
                 strict: bool = True) -> np.ndarray:
    """State derivative under the input u = (qdd_j, lam)."""
    x = _check_state(x)
    u = np.asarray(u, dtype=float)
    if u.shape != (NU,):
        raise DynamicsError(f"input must have dimension {NU}")
    if strict:
        lam = u[NJ:]
        for f in mode.swing_feet:
            if np.any(np.abs(lam[2 * f:2 * f + 2]) > 1e-9):
                raise DynamicsError(f"nonzero contact force on swing foot {f}")
    xdot = flow_masked(chain_of(model), x, u, mode_mask(mode))
    xdot[:NQ] = rate_transform(x[:NQ], x[NQ:])
    return xdot


def recover_torques(model: RobotModel, x, u, mode: ContactMode) -> np.ndarray:
    """Invert the actuated rows for the torque realizing (qdd_j, lam) at x."""
    x = _check_state(x)
    u = np.asarray(u, dtype=float)
    if u.shape != (NU,):
        raise DynamicsError(f"input must have dimension {NU}")
    return torques_masked(chain_of(model), x, u, mode_mask(mode))


def impulse_map(model: RobotModel, x, mode_post: ContactMode):
    """Instantaneous velocity reset when the post-transition feet touch down.

    Positions are continuous; velocities solve
        [D  -Jc'^T] [qd+]   [D qd-]
        [Jc'  0   ] [ F ] = [  0  ]
    with Jc' the stance Jacobian of mode_post.  Returns (x_post, F).
    Kinetic energy never increases (D-orthogonal projection).
    """
    x = _check_state(x)
    if mode_post.n_contacts == 0:
        return x.copy(), np.zeros(0)
    terms = compute_terms(model, x, mode_post)
    q, qd = x[:NQ], x[NQ:]
    nc2 = terms.Jc.shape[0]
    kkt = np.zeros((NQ + nc2, NQ + nc2))
    kkt[:NQ, :NQ] = terms.D
    kkt[:NQ, NQ:] = -terms.Jc.T
    kkt[NQ:, :NQ] = terms.Jc
    rhs = np.concatenate([terms.D @ qd, np.zeros(nc2)])
    cond = np.linalg.cond(kkt)
    if not np.isfinite(cond) or cond > 1e12:
        raise DynamicsError(f"impulse KKT system near singular (cond {cond:.2e})")
    sol = np.linalg.solve(kkt, rhs)
    x_post = np.concatenate([q, sol[:NQ]])
    return x_post, sol[NQ:]


def foot_kinematics(model: RobotModel, x, foot: int, u=None,
                    mode: ContactMode | None = None):
    """Foot position and velocity; with (u, mode) also the acceleration."""
    x = _check_state(x)
    chain = chain_of(model)
    kin = kinematics(chain, x[:NQ], x[NQ:])
    p = kin.foot_p[foot]
    v = kin.foot_jac[foot] @ x[NQ:]
    if u is None:
        return p, v
    if mode is None:
        raise DynamicsError("foot acceleration needs the contact mode")
    xdot = flow_masked(chain, x, np.asarray(u, dtype=float), mode_mask(mode))
    qdd = xdot[NQ:]
    a = kin.foot_jac[foot] @ qdd + kin.foot_vp[foot]
    return p, v, a


def foot_heights(model: RobotModel, q) -> np.ndarray:
    """Vertical position of both feet (batched over leading dims of q)."""
    chain = chain_of(model)
    kin = kinematics(chain, q, np.zeros_like(q))
    return np.stack([kin.foot_p[0][..., 1], kin.foot_p[1][..., 1]], axis=-1)


def mechanical_energy(model: RobotModel, x) -> tuple[float, float]:
    """Kinetic and potential energy of the full model."""
    x = _check_state(x)
    chain = chain_of(model)
    q, qd = x[:NQ], x[NQ:]
    d, _, kin = mass_and_bias(chain, q, qd)
    kinetic = 0.5 * qd @ d @ qd
    potential = -sum(m * (chain.gravity @ p)
                     for m, p in zip(chain.masses, kin.com_p))
    return float(kinetic), float(potential)


def kinetic_energy(model: RobotModel, x) -> float:
    return mechanical_energy(model, x)[0]


# --- differentiation helpers ------------------------------------------------

CS_STEP = 1e-100


def complex_step_jacobian(fn, x, h: float = CS_STEP) -> np.ndarray:
    """Jacobian of fn at x via complex-step (machine-precision, no cancellation).

    fn must accept complex input of x's shape; returns (n_out, n_in).
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    pert = x.astype(complex)[None, :] + 1j * h * np.eye(n)
    out = np.asarray([fn(pert[k]) for k in range(n)])
    return out.imag.T / h


def flow_jacobians(model: RobotModel, x, u, mode: ContactMode):
    """d xdot / dx and d xdot / du of the reparameterized flow (complex step)."""
    chain = chain_of(model)
    mask = mode_mask(mode)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    xc = np.repeat(x.astype(complex)[None, :], NX, axis=0) + 1j * CS_STEP * np.eye(NX)
    fx = flow_masked(chain, xc, u[None, :], mask).imag.T / CS_STEP
    uc = np.repeat(u.astype(complex)[None, :], NU, axis=0) + 1j * CS_STEP * np.eye(NU)
    fu = flow_masked(chain, x[None, :], uc, mask).imag.T / CS_STEP
    return fx, fu
