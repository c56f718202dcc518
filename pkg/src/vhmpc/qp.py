"""Dense convex QP solver with KKT certification.

Solves::

    minimize    1/2 u'Hu + f'u
    subject to  A u <= b

with an over-relaxed alternating-direction (ADMM) iteration in the style of
OSQP. Every few iterations the active set suggested by the iterates is
polished with an exact reduced KKT solve; a solution is reported as optimal
only after :func:`kkt_check` accepts it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import InvalidProblemError, ShapeError

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 4000


class QpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max-iterations"


@dataclass(frozen=True)
class QuadraticProgram:
    H: np.ndarray
    f: np.ndarray
    A_ineq: np.ndarray = None
    b_ineq: np.ndarray = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        f = np.asarray(self.f, dtype=float).reshape(-1)
        n = f.size
        A = np.zeros((0, n)) if self.A_ineq is None else np.asarray(self.A_ineq, dtype=float)
        b = np.zeros(0) if self.b_ineq is None else np.asarray(self.b_ineq, dtype=float).reshape(-1)
        if A.ndim == 1:
            A = A.reshape(-1, n) if A.size else np.zeros((0, n))
        if H.shape != (n, n):
            raise ShapeError(f"H has shape {H.shape}, expected {(n, n)}")
        if A.shape[1] != n or A.shape[0] != b.size:
            raise ShapeError(f"inequalities have shapes {A.shape} and {b.shape} for n={n}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "A_ineq", A)
        object.__setattr__(self, "b_ineq", b)

    @property
    def n(self) -> int:
        return self.f.size

    @property
    def m(self) -> int:
        return self.b_ineq.size

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.H @ u + self.f @ u)


@dataclass(frozen=True)
class KktReport:
    primal: float            # max(A u - b, 0)
    dual: float              # max(-lambda, 0)
    stationarity: float      # |H u + f + A' lambda|_inf
    complementarity: float   # max |lambda_i (A u - b)_i|

    def ok(self, tol: float) -> bool:
        return max(self.primal, self.dual, self.stationarity, self.complementarity) <= tol


@dataclass(frozen=True)
class QpSolution:
    u_star: np.ndarray
    status: QpStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    multipliers: np.ndarray = field(repr=False, default=None)

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def kkt_check(qp: QuadraticProgram, u, lam, tol: float = DEFAULT_TOL) -> tuple[bool, KktReport]:
    """Check first-order optimality of the pair ``(u, lam)`` (inf-norms)."""
    u = np.asarray(u, dtype=float).reshape(-1)
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if u.size != qp.n or lam.size != qp.m:
        raise ShapeError(f"got u of size {u.size} and lambda of size {lam.size} for n={qp.n}, m={qp.m}")
    slack = qp.A_ineq @ u - qp.b_ineq
    grad = qp.H @ u + qp.f + qp.A_ineq.T @ lam
    report = KktReport(
        primal=float(np.max(slack, initial=0.0)),
        dual=float(np.max(-lam, initial=0.0)),
        stationarity=float(np.max(np.abs(grad), initial=0.0)),
        complementarity=float(np.max(np.abs(lam * slack), initial=0.0)),
    )
    return report.ok(tol), report


def _validate(qp: QuadraticProgram) -> np.ndarray:
    for name in ("H", "f", "A_ineq", "b_ineq"):
        if not np.all(np.isfinite(getattr(qp, name))):
            raise InvalidProblemError(f"{name} contains non-finite entries")
    H = qp.H
    if not np.allclose(H, H.T, rtol=1e-10, atol=1e-12):
        raise InvalidProblemError("H is not symmetric")
    H = 0.5 * (H + H.T)
    try:
        linalg.cho_factor(H)
    except linalg.LinAlgError as exc:
        raise InvalidProblemError("H is not positive definite") from exc
    return H


def _polish(H, f, A, b, active, tol):
    """Solve the equality-constrained problem on ``active`` rows exactly."""
    n = f.size
    A_act = A[active]
    k = A_act.shape[0]
    if k == 0:
        return linalg.solve(H, -f, assume_a="pos"), np.zeros(0)
    # tiny regularization keeps the system solvable for dependent rows
    delta = 1e-11
    K = np.block([[H, A_act.T], [A_act, -delta * np.eye(k)]])
    rhs = np.concatenate([-f, b[active]])
    K_exact = np.block([[H, A_act.T], [A_act, np.zeros((k, k))]])
    try:
        lu = linalg.lu_factor(K)
    except (linalg.LinAlgError, ValueError):
        return None
    sol = linalg.lu_solve(lu, rhs)
    for _ in range(5):
        resid = rhs - K_exact @ sol
        if np.max(np.abs(resid)) <= 1e-3 * tol:
            break
        sol = sol + linalg.lu_solve(lu, resid)
    if not np.all(np.isfinite(sol)):
        return None
    return sol[:n], sol[n:]


def solve(
    qp: QuadraticProgram,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    warm_start: Optional[tuple] = None,
    rho: float = 0.1,
    sigma: float = 1e-6,
    alpha: float = 1.6,
    check_every: int = 5,
    adapt_every: int = 25,
) -> QpSolution:
    """Minimize ``qp``; see the module docstring for the method.

    ``warm_start`` is an optional ``(u, lambda)`` pair of matching sizes.
    """
    if not tol > 0:
        raise InvalidProblemError(f"tol must be positive, got {tol}")
    H = _validate(qp)
    f, A, b = qp.f, qp.A_ineq, qp.b_ineq
    n, m = qp.n, qp.m

    if m == 0:
        u = linalg.solve(H, -f, assume_a="pos")
        ok, rep = kkt_check(qp, u, np.zeros(0), tol)
        status = QpStatus.OPTIMAL if ok else QpStatus.MAX_ITERATIONS
        return QpSolution(u, status, 0, rep.primal, rep.stationarity, np.zeros(0))

    x = np.zeros(n)
    y = np.zeros(m)
    if warm_start is not None:
        wx, wy = warm_start
        if wx is not None and np.size(wx) == n:
            x = np.asarray(wx, dtype=float).copy()
        if wy is not None and np.size(wy) == m:
            y = np.maximum(np.asarray(wy, dtype=float), 0.0)
    z = np.minimum(A @ x, b)

    def factor(r):
        return linalg.cho_factor(H + sigma * np.eye(n) + r * (A.T @ A))

    chol = factor(rho)
    tried: set[bytes] = set()
    eps_inf = 1e-7
    r_prim = r_dual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        y_prev = y
        rhs = sigma * x - f + A.T @ (rho * z - y)
        x_tilde = linalg.cho_solve(chol, rhs)
        z_tilde = A @ x_tilde
        x = alpha * x_tilde + (1.0 - alpha) * x
        z_relax = alpha * z_tilde + (1.0 - alpha) * z
        z = np.minimum(z_relax + y / rho, b)
        y = y + rho * (z_relax - z)

        if it % check_every and it != max_iter:
            continue

        Ax = A @ x
        r_prim = float(np.max(np.abs(Ax - z)))
        Aty = A.T @ y
        Hx = H @ x
        r_dual = float(np.max(np.abs(Hx + f + Aty)))

        # active-set polish whenever the iterates suggest a new active set
        active = (b - z) < y
        key = np.packbits(active).tobytes()
        if key not in tried:
            tried.add(key)
            pol = _polish(H, f, A, b, active, tol)
            if pol is not None:
                u_p, lam_act = pol
                lam = np.zeros(m)
                lam[active] = lam_act
                ok, rep = kkt_check(qp, u_p, lam, tol)
                if ok:
                    return QpSolution(u_p, QpStatus.OPTIMAL, it, rep.primal, rep.stationarity, lam)

        if r_prim <= tol and r_dual <= tol:
            ok, rep = kkt_check(qp, x, y, tol)
            if ok:
                return QpSolution(x.copy(), QpStatus.OPTIMAL, it, rep.primal, rep.stationarity, y.copy())

        # Farkas certificate: lambda >= 0, A'lambda = 0, b'lambda < 0
        dy = np.maximum(y - y_prev, 0.0)
        dy_norm = float(np.max(dy))
        if dy_norm > 0:
            if (np.max(np.abs(A.T @ dy)) <= eps_inf * dy_norm
                    and float(b @ dy) < -eps_inf * dy_norm):
                return QpSolution(x.copy(), QpStatus.INFEASIBLE, it, r_prim, r_dual, y.copy())

        if it % adapt_every == 0:
            p_scale = max(np.max(np.abs(Ax)), np.max(np.abs(z)), 1e-12)
            d_scale = max(np.max(np.abs(Hx)), np.max(np.abs(Aty)), np.max(np.abs(f)), 1e-12)
            ratio = np.sqrt((r_prim / p_scale) / max(r_dual / d_scale, 1e-30))
            new_rho = float(np.clip(rho * ratio, 1e-6, 1e6))
            if new_rho > 5 * rho or new_rho < 0.2 * rho:
                rho = new_rho
                chol = factor(rho)

    return QpSolution(x.copy(), QpStatus.MAX_ITERATIONS, it, r_prim, r_dual, y.copy())
