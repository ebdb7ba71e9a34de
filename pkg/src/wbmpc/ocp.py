"""Trajectory optimization core: relaxed-barrier Gauss-Newton SQP shooting.

Solves discrete optimal control problems of the form

    min   sum_k 1/2 |r_k(x_k, u_k)|^2  +  sum_k w_k . beta(g_k(x_k, u_k))
          + 1/2 |r_T(x_N)|^2
    s.t.  x_{k+1} = F_k(x_k, u_k)                  k = 0 .. N-1
          e_k(x_k, u_k) = 0                        (affine in u_k)
          x_0 = x_init            or general rows  b(x_0, x_N) = 0

Inequalities enter the objective through a relaxed logarithmic barrier
beta, so every iterate is well defined even when infeasible.  All problem
functions are differentiated by complex-step perturbation, which is exact
to double precision; the perturbations for every state and input
direction are stacked into one batched call per function, so problem
callables must accept arrays with arbitrary leading batch dimensions and
preserve complex dtype.

The equality-constrained Gauss-Newton QP is solved either by a Riccati
sweep after projecting the (input-affine) equality rows out of the input
space, which is the fast path used at control rates, or by a single
sparse KKT factorization, which additionally supports boundary rows
coupling the first and last state.  Globalization is a backtracking line
search on an exact l1 penalty with multiplier-driven weight updates and
Levenberg regularization on factorization failure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

# Perturbation size for complex-step derivatives.  With a purely
# imaginary step there is no subtractive cancellation, so the step can
# sit far below sqrt(eps) and the truncation error (O(h^2)) vanishes.
CS_STEP = 1e-100


class OcpError(RuntimeError):
    pass


class FactorizationError(OcpError):
    pass


class NanAtIterateError(OcpError):
    """Non-finite problem function value at an accepted iterate."""

    def __init__(self, node: int, what: str):
        super().__init__(f"non-finite {what} at node {node}")
        self.node = node
        self.what = what


# ---------------------------------------------------------------------------
# relaxed barrier


@dataclass(frozen=True)
class RelaxedBarrier:
    """Log barrier with a quadratic extension below the relaxation margin.

    For z > delta the penalty is -mu ln z.  Below delta it continues as

        mu/2 [((z - 2 delta)/delta)^2 - 1] - mu ln delta

    which matches value, slope and curvature at z = delta, so the result
    is convex, twice continuously differentiable and finite for every
    argument, including infeasible ones.  ``mu`` and ``delta`` may be
    arrays broadcasting against the constraint rows.
    """

    mu: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, float)))
        object.__setattr__(self, "delta", np.atleast_1d(np.asarray(self.delta, float)))
        if (self.mu <= 0).any() or (self.delta <= 0).any():
            raise OcpError("barrier weights and margins must be positive")

    def value(self, z):
        z = np.asarray(z, float)
        zs = np.where(z > self.delta, z, 1.0)  # keep log away from z <= 0
        quad = 0.5 * self.mu * (((z - 2.0 * self.delta) / self.delta) ** 2 - 1.0)
        return np.where(z > self.delta, -self.mu * np.log(zs),
                        quad - self.mu * np.log(self.delta))

    def d1(self, z):
        z = np.asarray(z, float)
        zs = np.where(z > self.delta, z, 1.0)
        return np.where(z > self.delta, -self.mu / zs,
                        self.mu * (z - 2.0 * self.delta) / self.delta ** 2)

    def d2(self, z):
        z = np.asarray(z, float)
        zs = np.where(z > self.delta, z, 1.0)
        return np.where(z > self.delta, self.mu / zs ** 2, self.mu / self.delta ** 2)


# ---------------------------------------------------------------------------
# problem specification


@dataclass
class ShootingProblem:
    """Multiple-shooting problem handed to :func:`solve_ocp`.

    ``dynamics(X, U)`` maps node states/inputs to the states predicted at
    the next nodes, batched over the node axis (and any leading axes).
    ``stage(X, U)`` returns the tuple ``(r, e, g)`` of cost residuals,
    equality rows and barrier arguments for nodes ``0..N-1``; rows masked
    out by ``eq_mask`` / zero ``g_weight`` must still be finite (use 1.0
    for disabled barrier arguments).  ``terminal(xN)`` returns the
    terminal cost residual.  All three must be complex-step safe.

    Exactly one of ``x_init`` (full pin on the first state, required by
    the Riccati backend) or ``boundary`` (general two-point rows
    ``b(x0, xN) = 0``, sparse backend only) may be set; neither makes the
    first state free.
    """

    nx: int
    nu: int
    N: int
    dynamics: Callable
    stage: Callable
    terminal: Callable
    n_res: int
    n_eq: int
    n_ineq: int
    n_res_T: int
    barrier: Optional[RelaxedBarrier] = None
    g_weight: Optional[np.ndarray] = None    # (N, n_ineq), includes dt scaling
    eq_mask: Optional[np.ndarray] = None     # (N, n_eq) bool
    x_init: Optional[np.ndarray] = None
    boundary: Optional[Callable] = None
    n_boundary: int = 0

    def __post_init__(self):
        if self.x_init is not None and self.boundary is not None:
            raise OcpError("pinning x0 and boundary rows are mutually exclusive")
        if self.n_ineq and (self.barrier is None or self.g_weight is None):
            raise OcpError("inequality rows need barrier parameters and weights")
        if self.x_init is not None:
            self.x_init = np.asarray(self.x_init, float)
            if self.x_init.shape != (self.nx,):
                raise OcpError("x_init has the wrong shape")


@dataclass
class SolverSettings:
    max_iters: int = 50
    tol_step: float = 1e-8        # accept-and-stop threshold on |step|_inf
    tol_kkt: float = 1e-6
    tol_feas: float = 1e-6
    backend: str = "riccati"      # "riccati" or "kkt"
    ls_backtrack: float = 0.5
    ls_max_trials: int = 10
    armijo: float = 1e-4
    penalty0: float = 10.0
    penalty_factor: float = 10.0
    penalty_max: float = 1e8
    reg0: float = 0.0
    reg_min: float = 1e-6
    reg_factor: float = 10.0
    reg_max: float = 1e6
    max_ls_failures: int = 3


@dataclass
class OcpSolution:
    X: np.ndarray
    U: np.ndarray
    converged: bool
    status: str
    iterations: int
    cost: float
    feas_inf: float
    kkt_inf: Optional[float]
    multipliers: Optional[dict]
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# linearization (complex step, all directions in one batched call)


@dataclass
class _Linearization:
    F: np.ndarray          # (N, nx) predicted next states
    defects: np.ndarray    # (N, nx)
    A: np.ndarray          # (N, nx, nx)
    Bm: np.ndarray         # (N, nx, nu)
    r: np.ndarray          # (N, n_res)
    e: np.ndarray          # (N, n_eq)
    g: np.ndarray          # (N, n_ineq)
    Jr: np.ndarray         # (N, n_res, nz)
    Je: np.ndarray         # (N, n_eq, nz)
    Jg: np.ndarray         # (N, n_ineq, nz)
    rT: np.ndarray         # (n_res_T,)
    JrT: np.ndarray        # (n_res_T, nx)
    bval: Optional[np.ndarray]
    Jb0: Optional[np.ndarray]
    JbN: Optional[np.ndarray]
    pin_gap: Optional[np.ndarray]
    cost: float
    feas_inf: float
    feas_l1: float
    gz: np.ndarray         # (N, nz) objective gradient at the nodes
    gN: np.ndarray         # (nx,) objective gradient at the terminal state


def _raise_on_nonfinite(arrays, what):
    pieces = [np.asarray(a, float).reshape(a.shape[0], -1)
              for a in arrays if a.size]
    if not pieces:
        return
    ok = np.isfinite(np.concatenate(pieces, axis=1)).all(axis=1)
    if not ok.all():
        raise NanAtIterateError(int(np.argmin(ok)), what)


def _masked_eq(problem: ShootingProblem, e: np.ndarray) -> np.ndarray:
    if problem.eq_mask is None or e.size == 0:
        return e
    return np.where(problem.eq_mask, e, 0.0)


def _cost_of(problem: ShootingProblem, r, g, rT) -> float:
    c = 0.5 * float(np.vdot(r, r).real) + 0.5 * float(np.vdot(rT, rT).real)
    if problem.n_ineq:
        c += float(np.sum(problem.g_weight * problem.barrier.value(g)))
    return c


def _feasibility(problem, defects, e_masked, bval, pin_gap):
    parts = [np.abs(defects).ravel()]
    if e_masked.size:
        parts.append(np.abs(e_masked).ravel())
    if bval is not None:
        parts.append(np.abs(bval).ravel())
    if pin_gap is not None:
        parts.append(np.abs(pin_gap).ravel())
    flat = np.concatenate(parts)
    return float(flat.max(initial=0.0)), float(flat.sum())


def _linearize(problem: ShootingProblem, X, U) -> _Linearization:
    nx, nu, N = problem.nx, problem.nu, problem.N
    nz = nx + nu
    h = CS_STEP
    ih = 1j * h

    Xc = np.repeat(X[:N][None], nz, axis=0).astype(complex)
    Uc = np.repeat(U[None], nz, axis=0).astype(complex)
    for d in range(nx):
        Xc[d, :, d] += ih
    for d in range(nu):
        Uc[nx + d, :, d] += ih

    Fc = np.asarray(problem.dynamics(Xc, Uc))
    rc, ec, gc = problem.stage(Xc, Uc)
    rc, ec, gc = (np.asarray(a) for a in (rc, ec, gc))

    # the real part of any perturbed evaluation is the nominal value: the
    # imaginary step only contaminates it at O(h^2) = 1e-200
    F = Fc[0].real
    r, e, g = rc[0].real, ec[0].real, gc[0].real
    _raise_on_nonfinite([F], "dynamics")
    _raise_on_nonfinite([r, e, g], "stage functions")

    A = Fc.imag[:nx].transpose(1, 2, 0) / h
    Bm = Fc.imag[nx:].transpose(1, 2, 0) / h
    Jr = rc.imag.transpose(1, 2, 0) / h
    Je = ec.imag.transpose(1, 2, 0) / h
    Jg = gc.imag.transpose(1, 2, 0) / h

    xN = X[N]
    XTc = np.repeat(xN[None], nx, axis=0).astype(complex)
    XTc[np.arange(nx), np.arange(nx)] += ih
    rTc = np.asarray(problem.terminal(XTc))
    rT = rTc[0].real
    JrT = rTc.imag.T / h
    if not np.isfinite(rT).all():
        raise NanAtIterateError(N, "terminal residual")

    bval = Jb0 = JbN = None
    if problem.boundary is not None:
        B0c = np.repeat(X[0][None], 2 * nx, axis=0).astype(complex)
        BNc = np.repeat(xN[None], 2 * nx, axis=0).astype(complex)
        for d in range(nx):
            B0c[d, d] += ih
            BNc[nx + d, d] += ih
        bc = np.asarray(problem.boundary(B0c, BNc))
        bval = bc[0].real
        Jb0 = bc.imag[:nx].T / h
        JbN = bc.imag[nx:].T / h
        if not np.isfinite(bval).all():
            raise NanAtIterateError(0, "boundary rows")

    defects = F - X[1:]
    pin_gap = (problem.x_init - X[0]) if problem.x_init is not None else None
    e_m = _masked_eq(problem, e)
    feas_inf, feas_l1 = _feasibility(problem, defects, e_m, bval, pin_gap)
    cost = _cost_of(problem, r, g, rT)

    gz = np.einsum("kri,kr->ki", Jr, r) if r.size else np.zeros((N, nz))
    if problem.n_ineq:
        w1 = problem.g_weight * problem.barrier.d1(g)
        gz = gz + np.einsum("kg,kgi->ki", w1, Jg)
    gN = JrT.T @ rT if rT.size else np.zeros(nx)

    return _Linearization(F, defects, A, Bm, r, e, g, Jr, Je, Jg, rT, JrT,
                          bval, Jb0, JbN, pin_gap, cost, feas_inf, feas_l1,
                          gz, gN)


@dataclass
class _EvalPoint:
    cost: float
    feas_inf: float
    feas_l1: float
    defects: np.ndarray
    e: np.ndarray
    bval: Optional[np.ndarray]
    pin_gap: Optional[np.ndarray]

    @property
    def merit_parts(self):
        return self.cost, self.feas_inf, self.feas_l1


def _real_eval(problem: ShootingProblem, X, U) -> Optional[_EvalPoint]:
    """Cost and constraint values at a trial point; None when non-finite."""
    N = problem.N
    F = np.asarray(problem.dynamics(X[:N], U))
    r, e, g = (np.asarray(a) for a in problem.stage(X[:N], U))
    rT = np.asarray(problem.terminal(X[N]))
    pieces = [F, r, e, g, rT]
    bval = None
    if problem.boundary is not None:
        bval = np.asarray(problem.boundary(X[0], X[N]))
        pieces.append(bval)
    if not all(np.isfinite(p).all() for p in pieces):
        return None
    defects = F - X[1:]
    pin_gap = (problem.x_init - X[0]) if problem.x_init is not None else None
    feas_inf, feas_l1 = _feasibility(problem, defects, _masked_eq(problem, e),
                                     bval, pin_gap)
    return _EvalPoint(_cost_of(problem, r, g, rT), feas_inf, feas_l1,
                      defects, e, bval, pin_gap)


# ---------------------------------------------------------------------------
# QP subproblem


@dataclass
class QpData:
    nx: int
    nu: int
    N: int
    A: np.ndarray
    Bm: np.ndarray
    d: np.ndarray
    H: np.ndarray          # (N, nz, nz) Gauss-Newton stage Hessians
    q: np.ndarray          # (N, nz)
    HN: np.ndarray
    qN: np.ndarray
    Cx: list               # per node (ne_k, nx)
    Cu: list               # per node (ne_k, nu)
    ev: list               # per node (ne_k,)
    dx0: Optional[np.ndarray] = None
    Jb0: Optional[np.ndarray] = None
    JbN: Optional[np.ndarray] = None
    bv: Optional[np.ndarray] = None


@dataclass
class QpStep:
    dX: np.ndarray
    dU: np.ndarray
    p: np.ndarray          # (N, nx) multipliers of the shooting defects
    mu: list               # per node equality multipliers
    pi0: Optional[np.ndarray]
    pib: Optional[np.ndarray]

    @property
    def mult_inf(self) -> float:
        vals = [np.abs(self.p).max(initial=0.0)]
        vals += [np.abs(m).max(initial=0.0) for m in self.mu]
        if self.pi0 is not None:
            vals.append(np.abs(self.pi0).max(initial=0.0))
        if self.pib is not None:
            vals.append(np.abs(self.pib).max(initial=0.0))
        return float(max(vals))

    @property
    def step_inf(self) -> float:
        return float(max(np.abs(self.dX).max(initial=0.0),
                         np.abs(self.dU).max(initial=0.0)))


def _build_qp(problem: ShootingProblem, lin: _Linearization) -> QpData:
    nx, nu, N = problem.nx, problem.nu, problem.N
    nz = nx + nu
    if lin.Jr.size:
        H = np.einsum("kri,krj->kij", lin.Jr, lin.Jr)
    else:
        H = np.zeros((N, nz, nz))
    q = lin.gz.copy()
    if problem.n_ineq:
        w2 = problem.g_weight * problem.barrier.d2(lin.g)
        H = H + np.einsum("kg,kgi,kgj->kij", w2, lin.Jg, lin.Jg)
    HN = lin.JrT.T @ lin.JrT if lin.rT.size else np.zeros((nx, nx))
    qN = lin.gN

    Cx, Cu, ev = [], [], []
    for k in range(N):
        if problem.n_eq == 0:
            idx = np.empty(0, dtype=int)
        elif problem.eq_mask is None:
            idx = np.arange(problem.n_eq)
        else:
            idx = np.flatnonzero(problem.eq_mask[k])
        Cx.append(lin.Je[k][idx, :nx])
        Cu.append(lin.Je[k][idx, nx:])
        ev.append(lin.e[k][idx])

    return QpData(nx, nu, N, lin.A, lin.Bm, lin.defects, H, q, HN, qN,
                  Cx, Cu, ev, dx0=lin.pin_gap, Jb0=lin.Jb0, JbN=lin.JbN,
                  bv=lin.bval)


def _recover_multipliers(qp: QpData, dX, dU) -> QpStep:
    """Defect/equality multipliers by backward stationarity recursion."""
    nx, N = qp.nx, qp.N
    p = np.zeros((N, nx))
    mu = [None] * N
    p_next = qp.HN @ dX[N] + qp.qN            # costate at the terminal node
    for k in range(N - 1, -1, -1):
        p[k] = p_next
        dz = np.concatenate([dX[k], dU[k]])
        gradz = qp.H[k] @ dz + qp.q[k]
        grad_u = gradz[nx:] + qp.Bm[k].T @ p_next
        Cu = qp.Cu[k]
        if Cu.shape[0]:
            # stationarity in u:  grad_u + Cu^T mu = 0, least squares
            mu[k] = -np.linalg.lstsq(Cu.T, grad_u, rcond=None)[0]
        else:
            mu[k] = np.zeros(0)
        p_next = gradz[:nx] + qp.A[k].T @ p[k]
        if mu[k].size:
            p_next = p_next + qp.Cx[k].T @ mu[k]
    pi0 = -p_next if qp.dx0 is not None else None
    return QpStep(dX, dU, p, mu, pi0, None)


def solve_qp_riccati(qp: QpData, reg: float = 0.0) -> QpStep:
    """Riccati sweep with nullspace projection of the equality rows.

    Requires a fully pinned first state and no boundary rows.  Equality
    rows must have full row rank in the input at every node.
    """
    if qp.dx0 is None or qp.bv is not None:
        raise OcpError("riccati backend needs a pinned x0 and no boundary rows")
    nx, nu, N = qp.nx, qp.nu, qp.N

    S = qp.HN.copy()
    s = qp.qN.copy()
    proj = [None] * N
    gains = [None] * N
    for k in range(N - 1, -1, -1):
        Hk, qk = qp.H[k], qp.q[k]
        Hxx, Hxu, Huu = Hk[:nx, :nx], Hk[:nx, nx:], Hk[nx:, nx:]
        qx, qu = qk[:nx], qk[nx:]
        Cu = qp.Cu[k]
        ne = Cu.shape[0]
        if ne:
            if ne > nu:
                raise FactorizationError(
                    f"more equality rows than inputs at node {k}")
            Uv, sv, Vt = np.linalg.svd(Cu)
            if sv.min() < 1e-9 * max(sv.max(), 1.0):
                raise FactorizationError(
                    f"equality rows rank deficient in the input at node {k}")
            pinv = Vt[:ne].T @ ((1.0 / sv)[:, None] * Uv.T)
            Z = Vt[ne:].T
            P = -pinv @ qp.Cx[k]
            w = -pinv @ qp.ev[k]
        else:
            P = np.zeros((nu, nx))
            Z = np.eye(nu)
            w = np.zeros(nu)
        proj[k] = (P, Z, w)

        Abar = qp.A[k] + qp.Bm[k] @ P
        Bbar = qp.Bm[k] @ Z
        cbar = qp.d[k] + qp.Bm[k] @ w

        HuuP = Huu @ P
        Hxx_p = Hxx + Hxu @ P + P.T @ Hxu.T + P.T @ HuuP
        Hxv_p = (Hxu + P.T @ Huu) @ Z
        Hvv_p = Z.T @ Huu @ Z
        qx_p = qx + P.T @ qu + (Hxu + P.T @ Huu) @ w
        qv_p = Z.T @ (qu + Huu @ w)

        Sc_s = S @ cbar + s
        Qxx = Hxx_p + Abar.T @ S @ Abar
        Qxv = Hxv_p + Abar.T @ S @ Bbar
        Qvv = Hvv_p + Bbar.T @ S @ Bbar
        Qx = qx_p + Abar.T @ Sc_s
        Qv = qv_p + Bbar.T @ Sc_s

        nv = Qvv.shape[0]
        if nv:
            Qvv_r = Qvv + reg * np.eye(nv)
            try:
                cf = scipy.linalg.cho_factor(Qvv_r, lower=True)
            except scipy.linalg.LinAlgError:
                raise FactorizationError(
                    f"input Hessian not positive definite at node {k}") from None
            K = -scipy.linalg.cho_solve(cf, Qxv.T)
            kv = -scipy.linalg.cho_solve(cf, Qv)
        else:
            K = np.zeros((0, nx))
            kv = np.zeros(0)
        gains[k] = (K, kv)

        S = Qxx + Qxv @ K
        S = 0.5 * (S + S.T)
        s = Qx + Qxv @ kv

    dX = np.zeros((N + 1, nx))
    dU = np.zeros((N, nu))
    dX[0] = qp.dx0
    for k in range(N):
        P, Z, w = proj[k]
        K, kv = gains[k]
        v = kv + K @ dX[k]
        dU[k] = P @ dX[k] + Z @ v + w
        dX[k + 1] = qp.A[k] @ dX[k] + qp.Bm[k] @ dU[k] + qp.d[k]
    if not (np.isfinite(dX).all() and np.isfinite(dU).all()):
        raise FactorizationError("riccati sweep produced non-finite step")
    return _recover_multipliers(qp, dX, dU)


def solve_qp_kkt(qp: QpData, reg: float = 0.0, reg_dual: float = 0.0) -> QpStep:
    """One sparse KKT factorization of the full QP.

    Handles everything the Riccati path does, plus boundary rows and a
    free or partially pinned first state.
    """
    nx, nu, N = qp.nx, qp.nu, qp.N
    nz = nx + nu
    n_var = N * nz + nx

    def xoff(k):
        return k * nz

    def uoff(k):
        return k * nz + nx

    rows_i, cols_i, vals = [], [], []

    def add_block(r0, c0, M):
        if M.size == 0:
            return
        rr, cc = np.nonzero(np.ones_like(M, dtype=bool))
        rows_i.append(r0 + rr)
        cols_i.append(c0 + cc)
        vals.append(np.asarray(M, float).ravel())

    # Hessian blocks (the Levenberg shift is added after assembly)
    for k in range(N):
        add_block(xoff(k), xoff(k), qp.H[k])
    add_block(xoff(N), xoff(N), qp.HN)

    q_all = np.zeros(n_var)
    for k in range(N):
        q_all[xoff(k):xoff(k) + nz] = qp.q[k]
    q_all[xoff(N):] = qp.qN

    # constraint rows: defects, node equalities, pin, boundary
    g_rows_i, g_cols_i, g_vals = [], [], []
    c_all = []
    row = 0

    def add_con(r0, c0, M):
        if M.size == 0:
            return
        rr, cc = np.nonzero(np.ones_like(M, dtype=bool))
        g_rows_i.append(r0 + rr)
        g_cols_i.append(c0 + cc)
        g_vals.append(np.asarray(M, float).ravel())

    defect_rows = []
    for k in range(N):
        defect_rows.append(row)
        add_con(row, xoff(k), qp.A[k])
        add_con(row, uoff(k), qp.Bm[k])
        add_con(row, xoff(k + 1), -np.eye(nx))
        c_all.append(qp.d[k])
        row += nx

    eq_rows = []
    for k in range(N):
        ne = qp.Cu[k].shape[0]
        eq_rows.append((row, ne))
        if ne:
            add_con(row, xoff(k), qp.Cx[k])
            add_con(row, uoff(k), qp.Cu[k])
            c_all.append(qp.ev[k])
            row += ne

    pin_row = None
    if qp.dx0 is not None:
        pin_row = row
        add_con(row, 0, np.eye(nx))
        c_all.append(-qp.dx0)
        row += nx

    b_row = None
    if qp.bv is not None:
        nb = qp.bv.shape[0]
        b_row = (row, nb)
        add_con(row, xoff(0), qp.Jb0)
        add_con(row, xoff(N), qp.JbN)
        c_all.append(qp.bv)
        row += nb

    n_con = row
    c_all = np.concatenate(c_all) if c_all else np.zeros(0)

    H = scipy.sparse.coo_matrix(
        (np.concatenate(vals) if vals else np.zeros(0),
         (np.concatenate(rows_i) if rows_i else np.zeros(0, int),
          np.concatenate(cols_i) if cols_i else np.zeros(0, int))),
        shape=(n_var, n_var))
    if reg:
        H = H + reg * scipy.sparse.eye(n_var)
    G = scipy.sparse.coo_matrix(
        (np.concatenate(g_vals) if g_vals else np.zeros(0),
         (np.concatenate(g_rows_i) if g_rows_i else np.zeros(0, int),
          np.concatenate(g_cols_i) if g_cols_i else np.zeros(0, int))),
        shape=(n_con, n_var))

    Dblk = -reg_dual * scipy.sparse.eye(n_con) if reg_dual else \
        scipy.sparse.coo_matrix((n_con, n_con))
    K = scipy.sparse.bmat([[H, G.T], [G, Dblk]], format="csc")
    rhs = np.concatenate([-q_all, -c_all])
    try:
        lu = scipy.sparse.linalg.splu(K)
        sol = lu.solve(rhs)
    except RuntimeError as exc:
        raise FactorizationError(f"sparse KKT factorization failed: {exc}") from None
    resid = np.abs(K @ sol - rhs).max(initial=0.0)
    if not np.isfinite(sol).all() or resid > 1e-7 * max(1.0, np.abs(rhs).max()):
        raise FactorizationError("sparse KKT solve inaccurate or singular")

    dz = sol[:n_var]
    lam = sol[n_var:]
    dX = np.zeros((N + 1, nx))
    dU = np.zeros((N, nu))
    for k in range(N):
        dX[k] = dz[xoff(k):xoff(k) + nx]
        dU[k] = dz[uoff(k):uoff(k) + nu]
    dX[N] = dz[xoff(N):]

    p = np.stack([lam[defect_rows[k]:defect_rows[k] + nx] for k in range(N)])
    mu = []
    for (r0, ne) in eq_rows:
        mu.append(lam[r0:r0 + ne].copy() if ne else np.zeros(0))
    pi0 = lam[pin_row:pin_row + nx].copy() if pin_row is not None else None
    pib = lam[b_row[0]:b_row[0] + b_row[1]].copy() if b_row is not None else None
    return QpStep(dX, dU, p, mu, pi0, pib)


def _soc_correction(problem: ShootingProblem, qp: QpData, trial: _EvalPoint,
                    backend: str, reg: float) -> Optional[QpStep]:
    """Second-order correction: same QP, constants re-evaluated at the trial.

    When the full SQP step is rejected only because the constraint
    curvature inflates the penalty term (the Maratos effect), re-solving
    the subproblem with the true constraint values at the trial point,
    but unchanged Jacobians and cost model, yields a small correction that
    restores feasibility to second order.
    """
    ev_trim = []
    for k in range(problem.N):
        if problem.n_eq == 0:
            idx = np.empty(0, dtype=int)
        elif problem.eq_mask is None:
            idx = np.arange(problem.n_eq)
        else:
            idx = np.flatnonzero(problem.eq_mask[k])
        ev_trim.append(trial.e[k][idx])
    qp_soc = QpData(qp.nx, qp.nu, qp.N, qp.A, qp.Bm, trial.defects,
                    qp.H, np.zeros_like(qp.q), qp.HN, np.zeros_like(qp.qN),
                    qp.Cx, qp.Cu, ev_trim, dx0=trial.pin_gap,
                    Jb0=qp.Jb0, JbN=qp.JbN, bv=trial.bval)
    try:
        return _solve_qp(qp_soc, backend, reg)
    except FactorizationError:
        return None


# ---------------------------------------------------------------------------
# KKT residual of the nonlinear problem


def _stationarity(problem: ShootingProblem, lin: _Linearization, mult: dict):
    nx, N = problem.nx, problem.N
    p = mult["defect"]
    mu = mult["equality"]
    pi0 = mult.get("initial")
    pib = mult.get("boundary")
    worst = 0.0
    for k in range(N):
        gx = lin.gz[k, :nx] + lin.A[k].T @ p[k]
        gu = lin.gz[k, nx:] + lin.Bm[k].T @ p[k]
        if mu[k].size:
            idx = (np.flatnonzero(problem.eq_mask[k])
                   if problem.eq_mask is not None else np.arange(problem.n_eq))
            Jek = lin.Je[k][idx]
            gx = gx + Jek[:, :nx].T @ mu[k]
            gu = gu + Jek[:, nx:].T @ mu[k]
        if k > 0:
            gx = gx - p[k - 1]
        else:
            if pi0 is not None:
                gx = gx + pi0  # pin rows enter as +I in the constraint Jacobian
            if pib is not None and lin.Jb0 is not None:
                gx = gx + lin.Jb0.T @ pib
        worst = max(worst, np.abs(gx).max(initial=0.0),
                    np.abs(gu).max(initial=0.0))
    gxN = lin.gN - p[N - 1]
    if pib is not None and lin.JbN is not None:
        gxN = gxN + lin.JbN.T @ pib
    worst = max(worst, np.abs(gxN).max(initial=0.0))
    return worst


def kkt_residual(problem: ShootingProblem, X, U, multipliers: dict):
    """(stationarity_inf, feasibility_inf) at the point, recomputed fresh."""
    lin = _linearize(problem, np.asarray(X, float), np.asarray(U, float))
    return _stationarity(problem, lin, multipliers), lin.feas_inf


# ---------------------------------------------------------------------------
# SQP driver


def _multipliers_compatible(problem: ShootingProblem, mult: Optional[dict]) -> bool:
    """Warm multipliers only fit if the constraint layout is unchanged."""
    if mult is None:
        return False
    p = mult.get("defect")
    mu = mult.get("equality")
    if p is None or mu is None:
        return False
    if np.shape(p) != (problem.N, problem.nx) or len(mu) != problem.N:
        return False
    for k in range(problem.N):
        if problem.n_eq == 0:
            ne = 0
        elif problem.eq_mask is None:
            ne = problem.n_eq
        else:
            ne = int(np.count_nonzero(problem.eq_mask[k]))
        if np.size(mu[k]) != ne:
            return False
    pin = mult.get("initial") is not None
    if pin != (problem.x_init is not None):
        return False
    return True


def _solve_qp(qp: QpData, backend: str, reg: float) -> QpStep:
    if backend == "riccati":
        return solve_qp_riccati(qp, reg)
    if backend == "kkt":
        return solve_qp_kkt(qp, reg, reg_dual=reg * 1e-2 if reg else 0.0)
    raise OcpError(f"unknown QP backend {backend!r}")


def solve_ocp(problem: ShootingProblem, X0, U0,
              settings: Optional[SolverSettings] = None,
              warm_multipliers: Optional[dict] = None) -> OcpSolution:
    st = settings or SolverSettings()
    X = np.array(X0, float)
    U = np.array(U0, float)
    if X.shape != (problem.N + 1, problem.nx) or U.shape != (problem.N, problem.nu):
        raise OcpError("initial guess has the wrong shape")
    if st.backend == "riccati" and problem.x_init is None:
        raise OcpError("riccati backend needs a fully pinned first state")

    mult = (warm_multipliers
            if _multipliers_compatible(problem, warm_multipliers) else None)
    nu_pen = st.penalty0
    reg = st.reg0
    trace = []
    status = "max_iters"
    converged = False
    kkt_inf = None
    ls_failures = 0
    iterations = 0

    for it in range(st.max_iters):
        iterations = it + 1
        try:
            lin = _linearize(problem, X, U)
        except NanAtIterateError as exc:
            status = f"nan_at_iterate(node={exc.node}, what={exc.what})"
            break

        kkt_inf = _stationarity(problem, lin, mult) if mult is not None else None
        trace.append({"iter": it, "cost": lin.cost, "feas": lin.feas_inf,
                      "kkt": kkt_inf, "reg": reg, "penalty": nu_pen})
        if (kkt_inf is not None and kkt_inf < st.tol_kkt
                and lin.feas_inf < st.tol_feas):
            status = "converged_kkt"
            converged = True
            break

        qp = _build_qp(problem, lin)
        step = None
        while True:
            try:
                step = _solve_qp(qp, st.backend, reg)
                break
            except FactorizationError:
                reg = max(reg * st.reg_factor, st.reg_min)
                if reg > st.reg_max:
                    break
        if step is None:
            status = "factorization_failure"
            break
        mult = {"defect": step.p, "equality": step.mu,
                "initial": step.pi0, "boundary": step.pib}

        if step.step_inf < st.tol_step:
            if lin.feas_inf < st.tol_feas:
                X = X + step.dX
                U = U + step.dU
                status = "converged_step"
                converged = True
            else:
                # the QP cannot move the iterate yet constraints are violated
                status = "stalled_infeasible"
            break

        nu_pen = min(max(nu_pen, 1.1 * step.mult_inf), st.penalty_max)
        grad_dot = (float(np.sum(lin.gz * np.concatenate(
            [step.dX[:-1], step.dU], axis=1))) + float(lin.gN @ step.dX[-1]))
        D = grad_dot - nu_pen * lin.feas_l1
        if D > 0.0:
            D = -1e-16
        merit0 = lin.cost + nu_pen * lin.feas_l1

        alpha = 1.0
        accepted = False
        merit_t = None
        soc_available = True
        for _ in range(st.ls_max_trials):
            Xt = X + alpha * step.dX
            Ut = U + alpha * step.dU
            ev = _real_eval(problem, Xt, Ut)
            if ev is not None:
                merit_t = ev.cost + nu_pen * ev.feas_l1
                if merit_t <= merit0 + st.armijo * alpha * D:
                    accepted = True
                    break
                if alpha == 1.0 and soc_available:
                    # full step rejected: one second-order correction try
                    soc_available = False
                    soc = _soc_correction(problem, qp, ev, st.backend, reg)
                    if soc is not None:
                        Xs = Xt + soc.dX
                        Us = Ut + soc.dU
                        evs = _real_eval(problem, Xs, Us)
                        if evs is not None:
                            merit_s = evs.cost + nu_pen * evs.feas_l1
                            if merit_s <= merit0 + st.armijo * D:
                                Xt, Ut, merit_t = Xs, Us, merit_s
                                accepted = True
                                break
            alpha *= st.ls_backtrack

        if not accepted:
            ls_failures += 1
            if lin.feas_inf > st.tol_feas:
                nu_pen = min(nu_pen * st.penalty_factor, st.penalty_max)
            reg = max(reg * st.reg_factor, st.reg_min)
            if ls_failures > st.max_ls_failures or reg > st.reg_max:
                status = "line_search_failure"
                break
            continue

        X, U = Xt, Ut
        trace[-1].update({"alpha": alpha, "step": step.step_inf,
                          "merit_before": merit0, "merit_after": merit_t})
        if alpha == 1.0 and reg:
            reg = 0.0 if reg < st.reg_min else reg * 0.3

    final = _real_eval(problem, X, U)
    if final is None:
        cost = float("nan")
        feas_inf = float("nan")
    else:
        cost, feas_inf = final.cost, final.feas_inf
    if kkt_inf is None and mult is not None and final is not None:
        try:
            kkt_inf, _ = kkt_residual(problem, X, U, mult)
        except NanAtIterateError:
            kkt_inf = None

    return OcpSolution(X, U, converged, status, iterations, cost, feas_inf,
                       kkt_inf, mult, trace)


# ---------------------------------------------------------------------------
# continuous-time LQR (terminal cost weight)


def care_solve(A, B, Q, R, Ncross=None, refine_iters: int = 20) -> np.ndarray:
    """Stabilizing solution of the continuous algebraic Riccati equation

        A'S + SA + Q - (SB + N) R^{-1} (B'S + N') = 0

    via the ordered real Schur form of the Hamiltonian matrix, polished
    with Newton-Kleinman iterations (each one a Lyapunov solve).  Raises
    when the residual does not reach 1e-8 relative to |Q|.
    """
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    Q = np.asarray(Q, float)
    R = np.asarray(R, float)
    n, m = B.shape
    Ncross = np.zeros((n, m)) if Ncross is None else np.asarray(Ncross, float)

    RiNT = np.linalg.solve(R, Ncross.T)
    At = A - B @ RiNT
    Qt = Q - Ncross @ RiNT
    Qt = 0.5 * (Qt + Qt.T)
    G = B @ np.linalg.solve(R, B.T)

    H = np.block([[At, -G], [-Qt, -At.T]])
    T, Zs, sdim = scipy.linalg.schur(H, output="real", sort="lhp")
    if sdim != n:
        raise OcpError("hamiltonian has no n-dimensional stable subspace")
    U1 = Zs[:n, :n]
    U2 = Zs[n:, :n]
    S = np.linalg.solve(U1.T, U2.T).T
    S = 0.5 * (S + S.T)

    qscale = max(1.0, np.abs(Q).max())

    def residual(Smat):
        KS = np.linalg.solve(R, B.T @ Smat + Ncross.T)
        return A.T @ Smat + Smat @ A + Q - (Smat @ B + Ncross) @ KS

    for _ in range(refine_iters):
        if np.abs(residual(S)).max() < 1e-12 * qscale:
            break
        K = np.linalg.solve(R, B.T @ S + Ncross.T)
        Ac = A - B @ K
        Qc = Q + K.T @ R @ K - Ncross @ K - K.T @ Ncross.T
        Qc = 0.5 * (Qc + Qc.T)
        S_new = scipy.linalg.solve_continuous_lyapunov(Ac.T, -Qc)
        S = 0.5 * (S_new + S_new.T)

    if np.abs(residual(S)).max() > 1e-8 * qscale:
        raise OcpError("riccati equation residual did not converge")
    return S
