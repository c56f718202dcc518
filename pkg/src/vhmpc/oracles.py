"""Independent reference computations used by the self-test and the test suite.

Nothing here shares code paths with the solvers it checks.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np


def enumerate_active_sets(H, f, A, b, feas_tol: float = 1e-9):
    """Brute-force QP solution: try every active set, keep the KKT point.

    Returns ``(u, lam)`` or ``None`` when no subset yields a feasible KKT
    point (infeasible problem).
    """
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, f.size)
    b = np.asarray(b, dtype=float)
    n, m = f.size, b.size
    for k in range(m + 1):
        for subset in itertools.combinations(range(m), k):
            S = list(subset)
            A_s = A[S]
            K = np.block([[H, A_s.T], [A_s, np.zeros((k, k))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-f, b[S]]))
            except np.linalg.LinAlgError:
                continue
            u, lam_s = sol[:n], sol[n:]
            if np.all(A @ u <= b + feas_tol) and np.all(lam_s >= -feas_tol):
                lam = np.zeros(m)
                lam[S] = lam_s
                return u, lam
    return None


def central_difference(fn: Callable[[], float], params: Sequence[np.ndarray], step: float = 1e-5):
    """Gradient of ``fn`` w.r.t. each array in ``params`` (perturbed in place)."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + step
            up = fn()
            flat[idx] = old - step
            down = fn()
            flat[idx] = old
            gflat[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def relative_error(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    x = np.concatenate([np.ravel(v) for v in a])
    y = np.concatenate([np.ravel(v) for v in b])
    scale = max(np.linalg.norm(x), np.linalg.norm(y), 1e-12)
    return float(np.linalg.norm(x - y) / scale)
