"""Dense complex linear algebra and the complex basis-pursuit solver.

Matrices are plain ``numpy`` arrays of ``complex128``.  The factorizations
delegate to LAPACK through ``scipy.linalg``; the sparse-recovery solver is an
ADMM implementation written here because it has to handle complex unknowns,
the sum-of-moduli objective and shared (symmetric) variables exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import ConvergenceError, InfeasibleError, InvalidArgumentError

__all__ = [
    "as_complex_matrix",
    "PivotedQR",
    "qr_pivoted",
    "numerical_rank",
    "pinv",
    "lstsq",
    "BasisPursuitProblem",
    "basis_pursuit",
    "l1_norm",
    "symmetric_pairs",
    "DEFAULT_RANK_TAU",
]

DEFAULT_RANK_TAU = 1e-6


def as_complex_matrix(M, name: str = "matrix") -> np.ndarray:
    """Return ``M`` as a 2-D complex128 array, rejecting NaN/Inf and empty input."""
    arr = np.asarray(M, dtype=np.complex128)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidArgumentError(f"{name} has a zero dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class PivotedQR:
    """``M[:, perm] = Q @ R`` with ``|R[i, i]|`` nonincreasing."""

    Q: np.ndarray
    R: np.ndarray
    perm: np.ndarray
    diag_magnitudes: np.ndarray

    def rank(self, tau: float = DEFAULT_RANK_TAU) -> int:
        d = self.diag_magnitudes
        if d.size == 0 or d[0] == 0.0:
            return 0
        return int(np.count_nonzero(d >= tau * d[0]))


def qr_pivoted(M) -> PivotedQR:
    """Householder QR with column pivoting (LAPACK ``geqp3``).

    Ties in the pivot choice go to the lower column index, so the result is a
    deterministic function of the input bytes.
    """
    A = as_complex_matrix(M)
    Q, R, perm = sla.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    # geqp3 can produce rounding-level inversions deep in a rank-deficient
    # tail; clamp so the documented ordering holds exactly.
    diag = np.minimum.accumulate(diag)
    return PivotedQR(Q=Q, R=R, perm=np.asarray(perm, dtype=np.intp), diag_magnitudes=diag)


def numerical_rank(M, tau: float = DEFAULT_RANK_TAU) -> int:
    return qr_pivoted(M).rank(tau)


def pinv(M, rcond: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via the SVD, discarding ``s < rcond * s_max``."""
    if not 0.0 < rcond < 1.0:
        raise InvalidArgumentError(f"rcond must lie in (0, 1), got {rcond}")
    A = as_complex_matrix(M)
    return np.linalg.pinv(A, rcond=rcond)


def lstsq(A, B) -> np.ndarray:
    """Minimum-norm minimizer of ``||A X - B||_F``.

    A 1-D ``B`` gives a 1-D result.
    """
    A = as_complex_matrix(A, "A")
    B_arr = np.asarray(B, dtype=np.complex128)
    vector = B_arr.ndim == 1
    B2 = as_complex_matrix(B_arr, "B")
    if A.shape[0] != B2.shape[0]:
        raise InvalidArgumentError(
            f"row counts differ: A has {A.shape[0]} rows, B has {B2.shape[0]}"
        )
    X, *_ = sla.lstsq(A, B2, lapack_driver="gelsd")
    return X[:, 0] if vector else X


def l1_norm(x) -> float:
    """Sum of complex moduli."""
    return float(np.sum(np.abs(x)))


def symmetric_pairs(n: int, offset: int = 0) -> list[tuple[int, int]]:
    """Index pairs tying ``Y[i, j]`` to ``Y[j, i]`` in a row-major ``vec(Y)``.

    ``offset`` shifts the indices when ``vec(Y)`` sits inside a longer unknown
    vector.
    """
    return [
        (offset + i * n + j, offset + j * n + i)
        for i in range(n)
        for j in range(i + 1, n)
    ]


@dataclass(frozen=True)
class BasisPursuitProblem:
    """``min sum|x_i|  s.t.  A x = b`` (or ``||A x - b|| <= epsilon``).

    ``symmetry_map`` lists disjoint index pairs whose unknowns are one shared
    variable.  ADMM defaults: penalty ``rho``, absolute and relative stopping
    tolerances ``tolerance``, iteration cap ``max_iters``.
    """

    A: np.ndarray
    b: np.ndarray
    symmetry_map: Optional[Sequence[tuple[int, int]]] = None
    tolerance: float = 1e-8
    max_iters: int = 50000
    rho: float = 1.0
    epsilon: float = 0.0
    rank_rcond: float = 1e-12
    feasibility_tol: float = 1e-7
    adaptive_rho: bool = True
    polish: bool = True
    x0: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.complex128)
        b = np.asarray(self.b, dtype=np.complex128).ravel()
        if A.ndim != 2:
            raise InvalidArgumentError("A must be 2-D")
        if A.shape[0] != b.shape[0]:
            raise InvalidArgumentError(
                f"A has {A.shape[0]} rows but b has length {b.shape[0]}"
            )
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise InvalidArgumentError("A and b must be finite")
        if self.tolerance <= 0 or self.max_iters < 1 or self.rho <= 0:
            raise InvalidArgumentError("tolerance, max_iters and rho must be positive")
        if self.epsilon < 0:
            raise InvalidArgumentError("epsilon must be nonnegative")
        if self.symmetry_map:
            seen: set[int] = set()
            n = A.shape[1]
            for i, j in self.symmetry_map:
                if i == j or i in seen or j in seen:
                    raise InvalidArgumentError("symmetry_map pairs must be disjoint")
                if not (0 <= i < n and 0 <= j < n):
                    raise InvalidArgumentError("symmetry_map index out of range")
                seen.update((i, j))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def shape(self):
        return self.A.shape


def _groups(n: int, pairs) -> tuple[np.ndarray, np.ndarray]:
    """Map each full index to a reduced variable; return (group, multiplicity)."""
    group = np.full(n, -1, dtype=np.intp)
    nxt = 0
    partner = {}
    for i, j in pairs or ():
        partner[i] = j
        partner[j] = i
    for i in range(n):
        if group[i] >= 0:
            continue
        group[i] = nxt
        j = partner.get(i)
        if j is not None:
            group[j] = nxt
        nxt += 1
    mult = np.bincount(group, minlength=nxt).astype(float)
    return group, mult


def _reduce_columns(A: np.ndarray, group: np.ndarray, n_red: int) -> np.ndarray:
    A_red = np.zeros((A.shape[0], n_red), dtype=np.complex128)
    np.add.at(A_red.T, group, A.T)
    return A_red


def _soft(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    mag = np.abs(v)
    scale = np.maximum(mag - t, 0.0)
    out = np.zeros_like(v)
    nz = scale > 0
    out[nz] = v[nz] * (scale[nz] / mag[nz])
    return out


def basis_pursuit(p: BasisPursuitProblem, return_info: bool = False):
    """Solve a complex basis-pursuit problem with ADMM.

    The objective is the sum of complex moduli, i.e. a group norm over each
    ``(Re, Im)`` pair; the separable ``|Re| + |Im|`` variant is not used.
    Shared variables from ``symmetry_map`` are solved for once and weighted by
    their multiplicity, so the returned vector satisfies the pairing exactly.

    Linearly dependent constraint rows are removed through a thin SVD of the
    reduced system; the surviving rows are whitened to an orthonormal set,
    which makes the projection step of the ADMM exact and cheap.

    Raises
    ------
    InfeasibleError
        ``b`` has a component outside the range of ``A`` larger than
        ``feasibility_tol * ||b||`` (equality form only).
    ConvergenceError
        The iteration cap was reached first.
    """
    A, b = p.A, p.b
    m, n = A.shape
    group, mult = _groups(n, p.symmetry_map)
    n_red = mult.size
    A_red = _reduce_columns(A, group, n_red) if n_red < n else A.copy()

    U, s, Vh = sla.svd(A_red, full_matrices=False, lapack_driver="gesvd")
    bnorm = float(np.linalg.norm(b))
    r = int(np.count_nonzero(s > p.rank_rcond * s[0])) if s.size and s[0] > 0 else 0
    U_r, s_r, Vh_r = U[:, :r], s[:r], Vh[:r]
    Ub = U_r.conj().T @ b
    b_perp = float(np.linalg.norm(b - U_r @ Ub))

    def expand(y):
        return y[group]

    info = {"rank": r, "dropped_rows": m - r, "iterations": 0, "rho": p.rho}

    if p.epsilon == 0.0:
        if b_perp > p.feasibility_tol * max(bnorm, np.finfo(float).tiny):
            raise InfeasibleError(
                f"b lies outside the range of A (out-of-range norm {b_perp:.3e}, "
                f"||b|| = {bnorm:.3e})",
                residual=b_perp,
            )
        if r == 0 or bnorm == 0.0:
            x = np.zeros(n, dtype=np.complex128)
            info["residual"] = bnorm
            return (x, info) if return_info else x
        try:
            y = _admm_equality(p, Vh_r, Ub / s_r, mult, info)
        except ConvergenceError as exc:
            exc.last_iterate = expand(exc.last_iterate)
            raise
    else:
        if r == 0:
            x = np.zeros(n, dtype=np.complex128)
            info["residual"] = bnorm
            return (x, info) if return_info else x
        try:
            y = _admm_ball(p, A_red, U_r, s_r, Vh_r, mult, info)
        except ConvergenceError as exc:
            exc.last_iterate = expand(exc.last_iterate)
            raise

    x = expand(y)
    info["residual"] = float(np.linalg.norm(A @ x - b))
    info["objective"] = l1_norm(x)
    return (x, info) if return_info else x


def _polish(P, c, w, z):
    """Correct ``z`` on its own support to exact feasibility, minimally."""
    S = np.flatnonzero(z)
    if S.size == 0:
        return None
    d, *_ = sla.lstsq(P[:, S], c - P @ z)
    cand = z.copy()
    cand[S] += d
    if np.linalg.norm(P @ cand - c) > 1e-10 * max(np.linalg.norm(c), 1.0):
        return None
    return cand


def _dual_bound(P, c, w, g, cand=None):
    """Lower bound on the optimum from a subgradient estimate ``g``.

    ``lam = P g`` is scaled into the dual-feasible set ``|P^H lam| <= w``;
    weak duality then gives ``Re(lam^H c) <= min sum w|y|``.  With a
    candidate solution, ``lam`` is first nudged so that its subgradient
    matches the candidate's phases on the support, which tightens the bound
    once the support is right.
    """
    Ph = P.conj().T
    lams = [P @ g]
    if cand is not None:
        S = np.flatnonzero(cand)
        if S.size:
            target = w[S] * cand[S] / np.abs(cand[S])
            corr, *_ = sla.lstsq(Ph[S], target - Ph[S] @ lams[0])
            lams.append(lams[0] + corr)
    best = -math.inf
    for lam in lams:
        ratio = np.max(np.abs(Ph @ lam) / w)
        if ratio > 1.0:
            lam = lam / ratio
        best = max(best, float(np.real(np.vdot(lam, c))))
    return best


def _admm_equality(p, P, c, w, info):
    """ADMM on ``min sum w|y|  s.t.  P y = c`` with orthonormal rows in ``P``.

    Besides the usual primal/dual residual test, every few iterations the
    iterate is polished onto its support and compared against a weak-duality
    bound; a relative gap below ``tolerance`` certifies optimality early.
    """
    n = P.shape[1]
    Ph = P.conj().T

    def project(v):
        return v - Ph @ (P @ v - c)

    def objective(y):
        return float(np.sum(w * np.abs(y)))

    x = Ph @ c
    if p.x0 is not None:
        x0 = np.asarray(p.x0, dtype=np.complex128).ravel()
        group, _ = _groups(x0.size, p.symmetry_map)
        z = np.zeros(n, dtype=np.complex128)
        np.add.at(z, group, x0)
        z /= np.bincount(group, minlength=n)
    else:
        z = x.copy()
    u = np.zeros(n, dtype=np.complex128)
    rho = p.rho
    sqn = math.sqrt(n)
    tol = p.tolerance
    best, best_obj, lower = None, math.inf, -math.inf
    converged = False
    for it in range(1, p.max_iters + 1):
        x = project(z - u)
        z_old = z
        z = _soft(x + u, w / rho)
        u = u + x - z
        r_norm = np.linalg.norm(x - z)
        s_norm = rho * np.linalg.norm(z - z_old)
        eps_pri = sqn * tol + tol * max(np.linalg.norm(x), np.linalg.norm(z))
        eps_dual = sqn * tol + tol * rho * np.linalg.norm(u)
        converged = r_norm <= eps_pri and s_norm <= eps_dual
        if converged or it % 25 == 0:
            for cand in (x, _polish(P, c, w, z) if p.polish else None):
                if cand is not None and objective(cand) < best_obj:
                    best, best_obj = cand, objective(cand)
            lower = max(lower, _dual_bound(P, c, w, rho * u, best))
            if best_obj - lower <= tol * max(best_obj, 1e-300):
                converged = True
        if converged:
            break
        if p.adaptive_rho and it % 10 == 0:
            if r_norm > 10.0 * s_norm:
                rho *= 2.0
                u /= 2.0
            elif s_norm > 10.0 * r_norm:
                rho /= 2.0
                u *= 2.0
    info["iterations"] = it
    info["rho"] = rho
    info["duality_gap"] = best_obj - lower
    if not converged:
        if best is None:
            best = x
        raise ConvergenceError(
            f"basis pursuit did not converge in {p.max_iters} iterations "
            f"(primal {r_norm:.3e}, dual {s_norm:.3e}, gap {best_obj - lower:.3e})",
            last_iterate=best,
            residual=float(r_norm),
        )
    return best


def _admm_ball(p, A, U_r, s_r, Vh_r, w, info):
    """ADMM on ``min sum w|y|  s.t.  ||A y - b|| <= epsilon``."""
    m, n = A.shape
    b = p.b
    Ah = A.conj().T
    shrink = s_r**2 / (1.0 + s_r**2)
    Vh_rh = Vh_r.conj().T

    def solve(rhs):
        # (I + A^H A)^{-1} through the thin SVD of A
        return rhs - Vh_rh @ (shrink * (Vh_r @ rhs))

    def ball(v):
        d = v - b
        nd = np.linalg.norm(d)
        return v if nd <= p.epsilon else b + d * (p.epsilon / nd)

    x = np.zeros(n, dtype=np.complex128)
    z = x.copy()
    q = ball(A @ x)
    u1 = np.zeros(n, dtype=np.complex128)
    u2 = np.zeros(m, dtype=np.complex128)
    rho = p.rho
    tol = p.tolerance
    sq = math.sqrt(n + m)
    for it in range(1, p.max_iters + 1):
        x = solve((z - u1) + Ah @ (q - u2))
        z_old, q_old = z, q
        z = _soft(x + u1, w / rho)
        Ax = A @ x
        q = ball(Ax + u2)
        u1 = u1 + x - z
        u2 = u2 + Ax - q
        r_norm = math.hypot(np.linalg.norm(x - z), np.linalg.norm(Ax - q))
        s_norm = rho * math.hypot(np.linalg.norm(z - z_old), np.linalg.norm(Ah @ (q - q_old)))
        scale_p = max(math.hypot(np.linalg.norm(x), np.linalg.norm(Ax)),
                      math.hypot(np.linalg.norm(z), np.linalg.norm(q)))
        scale_d = rho * math.hypot(np.linalg.norm(u1), np.linalg.norm(Ah @ u2))
        if r_norm <= sq * tol + tol * scale_p and s_norm <= sq * tol + tol * scale_d:
            info["iterations"] = it
            info["rho"] = rho
            return z
        if p.adaptive_rho and it % 10 == 0:
            if r_norm > 10.0 * s_norm:
                rho *= 2.0
                u1 /= 2.0
                u2 /= 2.0
            elif s_norm > 10.0 * r_norm:
                rho /= 2.0
                u1 *= 2.0
                u2 *= 2.0
    raise ConvergenceError(
        f"basis pursuit denoising did not converge in {p.max_iters} iterations",
        last_iterate=z,
        residual=float(r_norm),
    )
