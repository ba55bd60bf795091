"""Online reduced-basis stage: per-polygon coefficient solves and
reconstruction of the approximate vertex basis functions.

For a normalized polygon the pulled-back Laplacian splits over the fan
triangles into three scalar coefficients against the symmetric tensor basis,
so each vertex's Galerkin system over the M reduced functions assembles as a
contraction of the precomputed diagonal bricks with those coefficients.
"""

import logging

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import DatabaseError, SolverFailure
from .femcore import FEField, interpolate
from .geometry import build_affine_map, laplace_pullback_coeffs, map_points

log = logging.getLogger(__name__)

PIVOT_TOL = 1e-13
TIKHONOV_SCALE = 1e-12
RESIDUAL_TOL = 1e-10


class RBBasisEval:
    """Solved online stage for one polygon.

    w[l, j] is the coefficient of reduced basis function l in the expansion
    of the approximate basis function attached to vertex j.
    """

    __slots__ = ("db", "polygon", "amap", "M", "w", "regularized")

    def __init__(self, db, polygon, amap, M, w, regularized):
        self.db = db
        self.polygon = polygon
        self.amap = amap
        self.M = M
        self.w = w
        self.regularized = regularized


def reduced_system(amap, db, M):
    """Assemble every vertex's reduced Galerkin system from the bricks.

    Returns (A, rhs) with A[j][l', l] = pulled-back form of (trial basis l,
    test basis l') and rhs[j][l'] the matching right-hand side.
    """
    c = laplace_pullback_coeffs(amap)  # (n_fan, 3)
    Ad = db.adiag[:, :3, :, :M, :M]
    Fd = db.fdiag[:, :3, :, :M]
    # stored block is A_i(j, j, l_trial, l_test); the system matrix wants
    # A_i(j, j, l', l), hence the final transpose
    T = np.einsum("fv,fvjab->jab", c, Ad)
    A = T.transpose(0, 2, 1).copy()
    rhs = -np.einsum("fv,fvja->ja", c, Fd)
    return A, rhs


def reduced_solve(p, db, M):
    """Solve the M x M reduced system of every vertex of polygon p.

    p must be normalized (star center at the origin); its vertex count must
    match the database.  M=0 is allowed and yields the bare liftings.
    """
    if p.n != db.n:
        raise DatabaseError("polygon has %d vertices, database holds N=%d"
                            % (p.n, db.n))
    if M > db.mmax:
        raise DatabaseError("requested M=%d exceeds database M_max=%d"
                            % (M, db.mmax))
    amap = build_affine_map(p)
    if M == 0:
        return RBBasisEval(db, p, amap, 0, np.zeros((0, p.n)), False)
    A, rhs = reduced_system(amap, db, M)
    w, regularized = solve_reduced_systems(A, rhs)
    return RBBasisEval(db, p, amap, M, w, regularized)


def solve_reduced_systems(A, rhs):
    """Dense solve of every vertex's M x M system; w[:, j] solves A[j]."""
    n, M, _ = A.shape
    w = np.empty((M, n))
    regularized = False
    for j in range(n):
        Aj = A[j]
        bj = rhs[j]
        scale = np.abs(Aj).max()
        try:
            lu, piv = lu_factor(Aj)
            small_pivot = np.abs(np.diag(lu)).min() < PIVOT_TOL * max(scale, 1e-300)
        except ValueError:
            small_pivot = True
            lu = piv = None
        if small_pivot:
            shift = TIKHONOV_SCALE * max(np.trace(Aj) / M, 1e-300)
            log.warning("reduced system for vertex %d ill conditioned; "
                        "applying Tikhonov shift %.3e", j, shift)
            lu, piv = lu_factor(Aj + shift * np.eye(M))
            regularized = True
        x = lu_solve((lu, piv), bj)
        bnorm = np.linalg.norm(bj)
        res = np.linalg.norm(Aj @ x - bj) / max(bnorm, 1e-300)
        if bnorm > 0.0 and res > RESIDUAL_TOL:
            raise SolverFailure("reduced solve residual %.3e at vertex %d"
                                % (res, j))
        w[:, j] = x
    return w, regularized


def reconstruct_on_reference(ev, j):
    """Approximate basis function of vertex j on the reference mesh."""
    db = ev.db
    vals = db.liftings[j].copy()
    if ev.M:
        vals[db.interior] += ev.w[:, j] @ db.basis[j, :ev.M]
    return FEField(db.ref_mesh, vals)


def combine_reference(ev, coeffs):
    """Linear combination sum_j coeffs[j] * (approximate basis j)."""
    coeffs = np.asarray(coeffs, dtype=float)
    db = ev.db
    vals = coeffs @ db.liftings
    if ev.M:
        # per-vertex correction sum_l w[l,j] xi[j,l], weighted by coeffs[j]
        corr = np.einsum("j,lj,jln->n", coeffs, ev.w, db.basis[:, :ev.M])
        vals[db.interior] += corr
    return FEField(db.ref_mesh, vals)


def evaluate_physical(ev, j, points):
    """Approximate basis function j of the physical polygon at given points."""
    field = reconstruct_on_reference(ev, j)
    ref_pts, _ = map_points(ev.amap, points)
    return interpolate(field.mesh, field.values, ref_pts)
