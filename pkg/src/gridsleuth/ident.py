"""Admittance identification from low-rank phasor windows.

Pipeline
--------
1. ``select_basis``: pivoted QR of ``V^T`` splits the rows of ``V`` into
   ``R`` independent rows (``V2``) and ``D - R`` rows in their span (``V1``).
2. ``estimate_X``: ``V1 = X V2`` with ``X = V1 V2^+``.
3. ``estimate_YX``: least-squares ``Y_X`` with ``[I1; I2] = Y_X V2``.
4. ``compute_C``: ``C = I2 V2^+ - (V2^+)^T I1^T X``, which equals
   ``Y22 - X^T Y11 X`` for the true blocks.
5. ``recover_Y11_Y22``: the sparsest symmetric pair consistent with ``C``,
   relaxed to complex basis pursuit.
6. ``recover_Y12``: least squares given ``Y11``.

Blocks are expressed in the permuted order ``dep_rows + ind_rows``; use
:meth:`IdentifiedModel.full_matrix` for the matrix in original row order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DegenerateDataError,
    GridSleuthError,
    IdentificationError,
    InsufficientDataError,
    InvalidArgumentError,
)
from .numerics import (
    DEFAULT_RANK_TAU,
    BasisPursuitProblem,
    as_complex_matrix,
    basis_pursuit,
    lstsq,
    pinv,
    qr_pivoted,
    symmetric_pairs,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Partition:
    """Row split of a voltage window: ``T = dep_rows + ind_rows``."""

    D: int
    R: int
    dep_rows: tuple[int, ...]
    ind_rows: tuple[int, ...]

    def __post_init__(self):
        rows = sorted(self.dep_rows + self.ind_rows)
        if rows != list(range(self.D)) or len(self.ind_rows) != self.R:
            raise InvalidArgumentError("partition rows must split 0..D-1 with |ind_rows| = R")

    @property
    def T(self) -> tuple[int, ...]:
        return self.dep_rows + self.ind_rows

    @property
    def full_rank(self) -> bool:
        return self.R == self.D


@dataclass(frozen=True)
class IdentifiedModel:
    partition: Partition
    X: np.ndarray
    Y_X: np.ndarray
    Y11: np.ndarray
    Y22: np.ndarray
    Y12: np.ndarray
    residuals: dict = field(default_factory=dict)

    def full_matrix(self) -> np.ndarray:
        """Assemble the ``D x D`` admittance estimate in original row order."""
        p = self.partition
        dep, ind = list(p.dep_rows), list(p.ind_rows)
        Y = np.zeros((p.D, p.D), dtype=np.complex128)
        Y[np.ix_(dep, dep)] = self.Y11
        Y[np.ix_(dep, ind)] = self.Y12
        Y[np.ix_(ind, dep)] = self.Y12.T
        Y[np.ix_(ind, ind)] = self.Y22
        return Y

    def to_json(self, config_hash: str = "") -> str:
        def enc(M):
            return [[[float(z.real), float(z.imag)] for z in row] for row in np.atleast_2d(M)]

        p = self.partition
        doc = {
            "format_version": FORMAT_VERSION,
            "config_hash": config_hash,
            "partition": {"D": p.D, "R": p.R, "dep_rows": list(p.dep_rows),
                          "ind_rows": list(p.ind_rows)},
            "blocks": {name: {"shape": list(getattr(self, name).shape),
                              "data": enc(getattr(self, name))}
                       for name in ("X", "Y_X", "Y11", "Y22", "Y12")},
            "residuals": {k: float(v) for k, v in self.residuals.items()},
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "IdentifiedModel":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise InvalidArgumentError(f"unsupported model format {doc.get('format_version')!r}")
        pd = doc["partition"]
        part = Partition(pd["D"], pd["R"], tuple(pd["dep_rows"]), tuple(pd["ind_rows"]))

        def dec(block):
            shape = tuple(block["shape"])
            arr = np.array(block["data"], dtype=float).reshape(-1, 2) if block["data"] else np.zeros((0, 2))
            return (arr[:, 0] + 1j * arr[:, 1]).reshape(shape)

        b = doc["blocks"]
        return cls(part, *(dec(b[k]) for k in ("X", "Y_X", "Y11", "Y22", "Y12")),
                   residuals=dict(doc.get("residuals", {})))


def _VI(V, I=None):
    """Accept a PhasorWindow or bare matrices."""
    if I is None and hasattr(V, "V"):
        V, I = V.V, V.I
    return as_complex_matrix(V, "V"), (None if I is None else as_complex_matrix(I, "I"))


def select_basis(V, tau: float = DEFAULT_RANK_TAU) -> Partition:
    """Split rows of ``V`` (``D x K``) into independent and dependent sets.

    The independent rows are the first ``R`` pivots of a column-pivoted QR of
    ``V^T``; both index lists are returned in ascending order.
    """
    V, _ = _VI(V)
    if tau <= 0:
        raise InvalidArgumentError("tau must be positive")
    if not np.any(V):
        raise DegenerateDataError("voltage window is identically zero")
    qr = qr_pivoted(V.T)
    R = qr.rank(tau)
    perm = [int(i) for i in qr.perm]
    return Partition(V.shape[0], R, tuple(sorted(perm[R:])), tuple(sorted(perm[:R])))


def _split(M: np.ndarray, p: Partition):
    return M[list(p.dep_rows)], M[list(p.ind_rows)]


def estimate_X(V, p: Partition) -> np.ndarray:
    V, _ = _VI(V)
    if p.R == 0:
        raise DegenerateDataError("partition has no independent rows")
    V1, V2 = _split(V, p)
    return V1 @ pinv(V2)


def estimate_YX(V, I, p: Partition) -> np.ndarray:
    """Least-squares ``Y_X`` (``D x R``, rows in ``T`` order) from ``[I1; I2] = Y_X V2``."""
    V, I = _VI(V, I)
    _, V2 = _split(V, p)
    I_T = I[list(p.T)]
    return lstsq(V2.T, I_T.T).T


def compute_C(V, I, p: Partition, X: np.ndarray) -> np.ndarray:
    V, I = _VI(V, I)
    _, V2 = _split(V, p)
    I1, I2 = _split(I, p)
    V2p = pinv(V2)
    return I2 @ V2p - V2p.T @ I1.T @ X


def recover_Y11_Y22(C: np.ndarray, X: np.ndarray, tolerance: float = 1e-8,
                    max_iters: int = 50000, return_info: bool = False):
    """Sparsest symmetric ``(Y11, Y22)`` with ``Y22 - X^T Y11 X = C``.

    Unknowns are stacked as ``[vec(Y11); vec(Y22)]`` in row-major order, for
    which ``vec(X^T Y11 X) = (X^T kron X^T) vec(Y11)``.  Symmetry is imposed by
    sharing the ``(i, j)`` and ``(j, i)`` unknowns inside the solver.  ``C`` is
    symmetrized first, since the constraint's left side is symmetric for any
    admissible pair.
    """
    C = np.asarray(C, dtype=np.complex128)
    X = np.asarray(X, dtype=np.complex128)
    R = C.shape[0]
    if C.shape != (R, R) or X.shape[1] != R:
        raise InvalidArgumentError(f"C must be R x R and X must have R={R} columns")
    n1 = X.shape[0]
    C = 0.5 * (C + C.T)
    A = np.hstack([-np.kron(X.T, X.T), np.eye(R * R)])
    pairs = symmetric_pairs(n1) + symmetric_pairs(R, offset=n1 * n1)
    prob = BasisPursuitProblem(A, C.ravel(), symmetry_map=pairs, tolerance=tolerance,
                               max_iters=max_iters)
    y, info = basis_pursuit(prob, return_info=True)
    Y11 = y[: n1 * n1].reshape(n1, n1)
    Y22 = y[n1 * n1:].reshape(R, R)
    info["constraint_residual"] = float(np.max(np.abs(A @ y - C.ravel()), initial=0.0))
    return (Y11, Y22, info) if return_info else (Y11, Y22)


def recover_Y12(V, I, p: Partition, X: np.ndarray, Y11: np.ndarray,
                return_residual: bool = False):
    """Least-squares ``Y12`` from ``I1 = (Y11 X + Y12) V2``."""
    V, I = _VI(V, I)
    _, V2 = _split(V, p)
    I1, _ = _split(I, p)
    rhs = I1 - Y11 @ X @ V2
    Y12 = lstsq(V2.T, rhs.T).T
    if return_residual:
        res = float(np.linalg.norm(Y12 @ V2 - rhs) / max(np.linalg.norm(I1), 1e-300))
        return Y12, res
    return Y12


def _rel(num, den) -> float:
    den = float(np.linalg.norm(den))
    return float(np.linalg.norm(num)) / den if den > 0 else float(np.linalg.norm(num))


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except IdentificationError:
        raise
    except GridSleuthError as exc:
        raise IdentificationError(name, exc) from exc


def identify(V, I=None, tau: float = DEFAULT_RANK_TAU, tolerance: float = 1e-8,
             max_iters: int = 50000) -> IdentifiedModel:
    """Run the whole identification pipeline on one window.

    When the window has full row rank the partition is trivial, and the
    admittance matrix is solved directly by least squares; it is returned in
    the ``Y22`` slot with empty ``X``, ``Y11`` and ``Y12``.
    """
    V, I = _VI(V, I)
    if I is None or I.shape != V.shape:
        raise InvalidArgumentError("V and I must be D x K matrices of the same shape")
    D, K = V.shape
    p = _stage("select_basis", select_basis, V, tau)
    if p.R == K and K < D:
        raise IdentificationError(
            "select_basis",
            InsufficientDataError(f"window of K={K} columns saturates the rank; "
                                  "use more samples than the expected rank"))
    res: dict = {"rank": p.R}
    V2 = V[list(p.ind_rows)]
    if p.full_rank:
        Y = _stage("least_squares", lstsq, V.T, I.T).T
        res["asymmetry"] = float(np.max(np.abs(Y - Y.T)))
        Y = 0.5 * (Y + Y.T)
        res["ohm_residual"] = _rel(I - Y @ V, I)
        Y_X = Y[list(p.T)]
        empty = np.zeros((0, D), dtype=np.complex128)
        return IdentifiedModel(p, empty, Y_X, np.zeros((0, 0), np.complex128), Y, empty, res)

    X = _stage("estimate_X", estimate_X, V, p)
    V1 = V[list(p.dep_rows)]
    res["X_residual"] = _rel(V1 - X @ V2, V1)
    Y_X = _stage("estimate_YX", estimate_YX, V, I, p)
    I_T = I[list(p.T)]
    res["YX_residual"] = _rel(I_T - Y_X @ V2, I_T)
    C = _stage("compute_C", compute_C, V, I, p, X)
    res["C_asymmetry"] = float(np.max(np.abs(C - C.T)))
    Y11, Y22, info = _stage("recover_Y11_Y22", recover_Y11_Y22, C, X, tolerance, max_iters,
                            return_info=True)
    res["l1_constraint_residual"] = info["constraint_residual"]
    res["l1_iterations"] = info["iterations"]
    Y12, r12 = _stage("recover_Y12", recover_Y12, V, I, p, X, Y11, return_residual=True)
    res["Y12_residual"] = r12
    model = IdentifiedModel(p, X, Y_X, Y11, Y22, Y12, res)
    stacked = np.vstack([Y11 @ X + Y12, Y12.T @ X + Y22])
    res["stack_vs_YX"] = _rel(stacked - Y_X, Y_X)
    log.info("identified rank %d of %d; residuals %s", p.R, D, res)
    return model


def relative_errors(est: np.ndarray, true: np.ndarray, zero_floor: float = 1e-12) -> np.ndarray:
    """Element-wise relative error of an admittance estimate.

    Entries with ``|true| > zero_floor * max|true|`` are scored as
    ``|est - true| / |true|``.  Structural zeros have no scale of their own,
    so a spurious value there is scored against the matrix scale
    ``max|true|``.
    """
    est = np.asarray(est)
    true = np.asarray(true)
    scale = np.abs(true)
    top = float(scale.max(initial=0.0))
    if top == 0.0:
        return np.abs(est)
    denom = np.where(scale > zero_floor * top, scale, top)
    return np.abs(est - true) / denom
