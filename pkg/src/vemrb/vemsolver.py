"""Lowest-order virtual element solver on polygonal meshes.

Per cell, the discrete bilinear form splits into an exactly computable
consistency part a(Pi u, Pi v) built from the gradient projector, plus a
stabilization on the complement of the linears.  Three interchangeable
stabilizations are provided: the plain dof-product (dofi-dofi), its
diagonally weighted variant (D-recipe), and a reduced-basis stabilization
that evaluates the energy of approximate harmonic basis functions through
the precomputed database bricks.  Assembly loops cells in index order, so
results are deterministic.
"""

import logging

import numpy as np
from scipy.sparse import coo_matrix, csc_matrix, issparse
from scipy.sparse.linalg import splu

from .errors import (DatabaseError, InvalidArgument, MissingFile, ParseError,
                     SolverFailure)
from .geometry import Polygon, anisotropic_pullback_coeffs, normalize
from .rbonline import reduced_solve

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-12

# anisotropic tensors used in the experiments: K1 is strongly graded,
# K2 is nonsymmetric with a tiny second diagonal entry
K1 = np.array([[1.0, 0.0], [0.0, 6.25e-4]])
K2 = np.array([[1.0, 1e-2], [5e-3, 1e-4]])


class DiffusionProblem:
    """Constant-tensor diffusion problem -div(K grad u) = f, u = g on the
    boundary.  All callables take (k, 2) point arrays."""

    __slots__ = ("K", "f", "g", "exact", "exact_grad", "name")

    def __init__(self, K, f, g, exact=None, exact_grad=None, name="custom"):
        K = np.asarray(K, dtype=float)
        if K.shape != (2, 2) or not np.isfinite(K).all():
            raise InvalidArgument("K must be a finite 2x2 tensor")
        sym = 0.5 * (K + K.T)
        if np.linalg.eigvalsh(sym).min() <= 0.0:
            raise InvalidArgument("symmetric part of K must be positive definite")
        self.K = K
        self.f = f
        self.g = g
        self.exact = exact
        self.exact_grad = exact_grad
        self.name = name


def _cell_vertices(cell):
    v = cell.vertices if hasattr(cell, "vertices") else np.asarray(cell, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
        raise InvalidArgument("cell must be an (N, 2) vertex array, N >= 3")
    return v


def local_projector(cell):
    """Gradient projector onto linears from exact boundary integrals.

    Returns (coef, pdof): coef is (3, N) with column j holding (a0, a1, a2)
    of Pi e_j = a0 + a1 x + a2 y, and pdof is the N x N dof matrix whose
    column j evaluates Pi e_j at the vertices.
    """
    vr = _cell_vertices(cell)
    n = len(vr)
    mid = vr.mean(axis=0)
    v = vr - mid  # centered coordinates: the shoelace sums cancel badly
    # when a small cell sits far from the origin
    nxt = np.roll(v, -1, axis=0)
    edge = nxt - v
    elen = np.sqrt((edge * edge).sum(1))
    per = elen.sum()
    if per <= 0.0:
        raise InvalidArgument("cell has zero perimeter")
    area2 = (v[:, 0] * nxt[:, 1] - nxt[:, 0] * v[:, 1]).sum()
    if area2 <= 0.0:
        raise InvalidArgument("cell must be counterclockwise with positive area")
    # grad(Pi e_j) = (y_{j+1} - y_{j-1}, x_{j-1} - x_{j+1}) / (2 |K|)
    a1 = (np.roll(v[:, 1], -1) - np.roll(v[:, 1], 1)) / area2
    a2 = (np.roll(v[:, 0], 1) - np.roll(v[:, 0], -1)) / area2
    # boundary means: int_bnd e_j ds with edge-linear traces
    bmean = 0.5 * (elen + np.roll(elen, 1))
    bx = (elen * 0.5 * (v[:, 0] + nxt[:, 0])).sum()
    by = (elen * 0.5 * (v[:, 1] + nxt[:, 1])).sum()
    a0 = (bmean - a1 * bx - a2 * by) / per
    pdof = np.column_stack([np.ones(n), v]) @ np.vstack([a0, a1, a2])
    coef = np.vstack([a0 - a1 * mid[0] - a2 * mid[1], a1, a2])
    return coef, pdof


def local_consistency(cell, K, coef=None):
    """a(Pi e_r, Pi e_c) = |K| grad(Pi e_r) . K grad(Pi e_c); K acts on the
    trial (column) gradient, matching the weak form."""
    v = _cell_vertices(cell)
    if coef is None:
        coef, _ = local_projector(v)
    v = v - v.mean(axis=0)
    nxt = np.roll(v, -1, axis=0)
    area = 0.5 * (v[:, 0] * nxt[:, 1] - nxt[:, 0] * v[:, 1]).sum()
    G = coef[1:]  # (2, N), column j = grad(Pi e_j)
    return area * (G.T @ np.asarray(K, dtype=float) @ G)


def stab_dofi_dofi(cell, pdof=None):
    """S(v, w) = sum_i dof_i((I - Pi) v) dof_i((I - Pi) w)."""
    if pdof is None:
        _, pdof = local_projector(cell)
    R = np.eye(len(pdof)) - pdof
    return R.T @ R


def stab_drecipe(cell, K, coef=None, pdof=None):
    """dofi-dofi reweighted by omega_i = max(1, a(Pi e_i, Pi e_i))."""
    if coef is None or pdof is None:
        coef, pdof = local_projector(cell)
    C = local_consistency(cell, K, coef=coef)
    omega = np.maximum(1.0, np.diag(C))
    R = np.eye(len(pdof)) - pdof
    return R.T @ (omega[:, None] * R)


def rb_cell_energy(db, w, gamma, M):
    """Energy matrix of the approximate basis on the reference frame.

    Entry [k, l] is the pulled-back form evaluated with basis k in the
    trial slot and basis l in the test slot, contracted from the database
    bricks with the per-fan tensor coefficients gamma (n, 4).  Transposed
    lifting/basis pairings reuse the stored bricks; the antisymmetric
    tensor component flips sign under that transpose.
    """
    g = db.brick_g
    f = db.brick_f[..., :M]
    a = db.brick_a[..., :M, :M]
    gs = gamma * np.array([1.0, 1.0, 1.0, -1.0])
    out = np.einsum("iv,ivkl->kl", gamma, g)
    if M:
        out += np.einsum("iv,ivkla,ak->kl", gamma, f, w)
        out += np.einsum("iv,ivlkb,bl->kl", gs, f, w)
        out += np.einsum("iv,ivklab,ak,bl->kl", gamma, a, w, w)
    return out


def _db_for(db, n):
    if db is None:
        raise DatabaseError("reduced-basis stabilization needs a database")
    if isinstance(db, dict):
        got = db.get(n)
        if got is None:
            raise DatabaseError("no database for N=%d" % n)
        return got
    return db


def stab_rb(cell, K, db, M, pdof=None):
    """Reduced-basis stabilization S = R^T K_rb R.

    The cell is normalized (translate and scale) before the database lookup;
    in 2D the H1-type energy is invariant under that normalization, so the
    matrix is used without rescaling.  `db` is a single database or a dict
    keyed by vertex count.  Triangles need no stabilization (the projector
    is exact), so N = 3 returns zeros without touching the db.
    """
    v = _cell_vertices(cell)
    n = len(v)
    if pdof is None:
        _, pdof = local_projector(v)
    if n == 3:
        return np.zeros((3, 3))
    db = _db_for(db, n)
    pn, _, _ = normalize(cell if hasattr(cell, "vertices") else Polygon(v))
    ev = reduced_solve(pn, db, M)
    gamma = anisotropic_pullback_coeffs(ev.amap, K)
    krb = rb_cell_energy(db, ev.w, gamma, ev.M)
    R = np.eye(n) - pdof
    return R.T @ krb @ R


def local_rhs(cell, f):
    """F(e_j) = |bnd|^-1 int_K f * int_bnd e_j, the cell integral by the
    degree-2 midpoint rule on centroid fan triangles."""
    vr = _cell_vertices(cell)
    n = len(vr)
    mid = vr.mean(axis=0)
    v = vr - mid
    nxt = np.roll(v, -1, axis=0)
    elen = np.sqrt(((nxt - v) ** 2).sum(1))
    per = elen.sum()
    cross = v[:, 0] * nxt[:, 1] - nxt[:, 0] * v[:, 1]
    area = 0.5 * cross.sum()
    c = ((v + nxt) * cross[:, None]).sum(0) / (6.0 * area)
    tri_a = 0.5 * ((v[:, 0] - c[0]) * (nxt[:, 1] - c[1])
                   - (nxt[:, 0] - c[0]) * (v[:, 1] - c[1]))
    qp = np.concatenate([0.5 * (v + nxt), 0.5 * (v + c), 0.5 * (nxt + c)]) + mid
    wq = np.concatenate([tri_a, tri_a, tri_a]) / 3.0
    fint = float(wq @ np.asarray(f(qp), dtype=float))
    bmean = 0.5 * (elen + np.roll(elen, 1))
    return (fint / per) * bmean


class LocalVEM:
    """Per-cell pieces: projector, consistency, stabilization, load."""

    __slots__ = ("vertices", "coef", "pdof", "consistency", "stab", "rhs")

    def __init__(self, vertices, coef, pdof, consistency, stab, rhs):
        self.vertices = vertices
        self.coef = coef
        self.pdof = pdof
        self.consistency = consistency
        self.stab = stab
        self.rhs = rhs

    @property
    def matrix(self):
        return self.consistency + self.stab


STABS = ("dofi", "drecipe", "rb")


def build_local(cell, prob, stab="dofi", db=None, M=1, rb_fallback="error"):
    if stab not in STABS:
        raise InvalidArgument("unknown stabilization %r" % (stab,))
    v = _cell_vertices(cell)
    coef, pdof = local_projector(v)
    C = local_consistency(v, prob.K, coef=coef)
    if stab == "dofi":
        S = stab_dofi_dofi(v, pdof=pdof)
    elif stab == "drecipe":
        S = stab_drecipe(v, prob.K, coef=coef, pdof=pdof)
    else:
        use_rb = True
        if len(v) > 3:
            try:
                db = _db_for(db, len(v))
            except DatabaseError:
                if rb_fallback != "dofi":
                    raise
                log.warning("no database for N=%d, downgrading to dofi-dofi",
                            len(v))
                use_rb = False
        if use_rb:
            S = stab_rb(v, prob.K, db, M, pdof=pdof)
        else:
            S = stab_dofi_dofi(v, pdof=pdof)
    rhs = local_rhs(v, prob.f)
    return LocalVEM(v, coef, pdof, C, S, rhs)


class VEMSystem:
    """Assembled global system with Dirichlet data at boundary vertices."""

    __slots__ = ("mesh", "A", "rhs", "gvals", "interior", "_Aii")

    def __init__(self, mesh, A, rhs, gvals):
        self.mesh = mesh
        self.A = A
        self.rhs = rhs
        self.gvals = gvals
        self.interior = np.where(~mesh.boundary)[0]
        self._Aii = None

    def interior_matrix(self):
        if self._Aii is None:
            idx = self.interior
            self._Aii = self.A[idx][:, idx].tocsc()
        return self._Aii


_DOWNGRADE = object()


def assemble(mesh, prob, stab="dofi", db=None, M=1, rb_fallback="error"):
    """Assemble the global VEM system; cells are processed in index order.

    With stab="rb", `db` holds the trained databases (one or a dict keyed
    by N); cells whose N has no database follow rb_fallback: "error"
    aborts, "dofi" downgrades them with one warning per vertex count.
    """
    if stab not in STABS:
        raise InvalidArgument("unknown stabilization %r" % (stab,))
    dbmap = {}
    if stab == "rb":
        for n in sorted({len(c) for c in mesh.cells}):
            if n == 3:
                dbmap[n] = None
                continue
            try:
                dbmap[n] = _db_for(db, n)
            except DatabaseError:
                if rb_fallback != "dofi":
                    raise
                log.warning("no database for N=%d, using dofi-dofi for "
                            "those cells", n)
                dbmap[n] = _DOWNGRADE
    nv = mesh.nvertices
    rows, cols, vals = [], [], []
    rhs = np.zeros(nv)
    for ci in range(mesh.ncells):
        ring = np.asarray(mesh.cells[ci])
        cstab, cdb = stab, db
        if stab == "rb":
            cdb = dbmap[len(ring)]
            if cdb is _DOWNGRADE:
                cstab, cdb = "dofi", None
        try:
            loc = build_local(mesh.cell_polygon(ci), prob, stab=cstab, db=cdb,
                              M=M)
        except Exception as exc:
            raise type(exc)("cell %d: %s" % (ci, exc)) from exc
        A = loc.matrix
        k = len(ring)
        rows.append(np.repeat(ring, k))
        cols.append(np.tile(ring, k))
        vals.append(A.ravel())
        np.add.at(rhs, ring, loc.rhs)
    A = coo_matrix((np.concatenate(vals),
                    (np.concatenate(rows), np.concatenate(cols))),
                   shape=(nv, nv)).tocsr()
    gvals = np.zeros(nv)
    b = mesh.boundary
    gvals[b] = np.asarray(prob.g(mesh.vertices[b]), dtype=float)
    return VEMSystem(mesh, A, rhs, gvals)


def solve_system(system):
    """Interior solve with the boundary dofs eliminated; checks the residual."""
    idx = system.interior
    u = system.gvals.copy()
    if len(idx) == 0:
        return u
    Aii = system.interior_matrix()
    rhs = system.rhs[idx] - system.A[idx] @ u
    x = splu(Aii).solve(rhs)
    scale = np.linalg.norm(rhs)
    resid = np.linalg.norm(Aii @ x - rhs)
    if scale > 0.0 and resid > RESIDUAL_TOL * scale:
        raise SolverFailure("interior solve residual %.3e exceeds %.1e relative"
                            % (resid, RESIDUAL_TOL))
    u[idx] = x
    return u


def assemble_and_solve(mesh, prob, stab="dofi", db=None, M=1,
                       rb_fallback="error"):
    return solve_system(assemble(mesh, prob, stab=stab, db=db, M=M,
                                 rb_fallback=rb_fallback))


def _dominant_sq(matvec, n, tol, maxit):
    # power iteration on a symmetric PSD operator; stops when the Rayleigh
    # estimate stagnates to relative tol
    v = np.ones(n) + 1e-3 * np.arange(n) / max(1, n - 1)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(maxit):
        w = matvec(v)
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(new - est) <= tol * abs(new):
            return new
        est = new
    raise SolverFailure("power iteration did not settle in %d steps" % maxit)


def condition_estimate(A, tol=1e-6, maxit=100000):
    """2-norm condition estimate: largest singular value by power iteration
    on A^T A, smallest by inverse iteration reusing one factorization."""
    if issparse(A):
        Ac = A.tocsc()
    else:
        Ac = csc_matrix(np.asarray(A, dtype=float))
    n = Ac.shape[0]
    if Ac.shape[0] != Ac.shape[1] or n == 0:
        raise InvalidArgument("need a square nonempty matrix")
    At = Ac.T.tocsc()
    hi = _dominant_sq(lambda v: At @ (Ac @ v), n, tol, maxit)
    lu = splu(Ac)
    inv = _dominant_sq(lambda v: lu.solve(lu.solve(v, trans="T")), n, tol, maxit)
    if hi <= 0.0 or inv <= 0.0:
        raise SolverFailure("condition estimate degenerated")
    return float(np.sqrt(hi * inv))


def _pts(pts):
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return pts[:, 0], pts[:, 1]


def poisson():
    """Isotropic reference problem, u = sin(4 pi x) sin(4 pi y) / (32 pi^2)."""
    s = 1.0 / (32.0 * np.pi ** 2)

    def exact(pts):
        x, y = _pts(pts)
        return s * np.sin(4 * np.pi * x) * np.sin(4 * np.pi * y)

    def grad(pts):
        x, y = _pts(pts)
        c = 4.0 * np.pi * s
        return np.stack([c * np.cos(4 * np.pi * x) * np.sin(4 * np.pi * y),
                         c * np.sin(4 * np.pi * x) * np.cos(4 * np.pi * y)],
                        axis=1)

    def f(pts):
        x, y = _pts(pts)
        return np.sin(4 * np.pi * x) * np.sin(4 * np.pi * y)

    return DiffusionProblem(np.eye(2), f, exact, exact=exact, exact_grad=grad,
                            name="poisson")


def test1(nu=80):
    """Strongly graded tensor K1 with a solution oscillating fast in y."""
    k22 = K1[1, 1]

    def exact(pts):
        x, y = _pts(pts)
        return np.sin(2 * np.pi * x) * np.sin(nu * np.pi * y)

    def grad(pts):
        x, y = _pts(pts)
        return np.stack(
            [2 * np.pi * np.cos(2 * np.pi * x) * np.sin(nu * np.pi * y),
             nu * np.pi * np.sin(2 * np.pi * x) * np.cos(nu * np.pi * y)],
            axis=1)

    def f(pts):
        return ((2 * np.pi) ** 2 + k22 * (nu * np.pi) ** 2) * exact(pts)

    return DiffusionProblem(K1, f, exact, exact=exact, exact_grad=grad,
                            name="test1")


def test2(nu1=80, nu2=30):
    """Nonsymmetric tensor K2 with a piecewise solution whose gradient is
    discontinuous across x = 1/2.  The load is the pointwise strong residual
    of each piece; the flux jump along the interface is not resolved, which
    bounds the attainable accuracy on fine meshes."""
    pi = np.pi

    def _left(x, y, d):
        X = np.sin(2 * pi * x) * np.cos(pi * x)
        Y = np.sin(nu1 * pi * y)
        if d == "u":
            return X * Y
        Xp = 2 * pi * np.cos(2 * pi * x) * np.cos(pi * x) \
            - pi * np.sin(2 * pi * x) * np.sin(pi * x)
        Yp = nu1 * pi * np.cos(nu1 * pi * y)
        if d == "gx":
            return Xp * Y
        if d == "gy":
            return X * Yp
        Xpp = -5 * pi ** 2 * np.sin(2 * pi * x) * np.cos(pi * x) \
            - 4 * pi ** 2 * np.cos(2 * pi * x) * np.sin(pi * x)
        return Xpp * Y, Xp * Yp, -(nu1 * pi) ** 2 * X * Y

    def _right(x, y, d):
        X = np.cos(nu1 * pi * x) * np.cos(pi * x)
        Y = np.sin(nu2 * pi * (pi - y))
        if d == "u":
            return X * Y
        Xp = -nu1 * pi * np.sin(nu1 * pi * x) * np.cos(pi * x) \
            - pi * np.cos(nu1 * pi * x) * np.sin(pi * x)
        Yp = -nu2 * pi * np.cos(nu2 * pi * (pi - y))
        if d == "gx":
            return Xp * Y
        if d == "gy":
            return X * Yp
        Xpp = -(nu1 ** 2 + 1) * pi ** 2 * np.cos(nu1 * pi * x) * np.cos(pi * x) \
            + 2 * nu1 * pi ** 2 * np.sin(nu1 * pi * x) * np.sin(pi * x)
        return Xpp * Y, Xp * Yp, -(nu2 * pi) ** 2 * X * Y

    def _piecewise(pts, d):
        x, y = _pts(pts)
        left = x <= 0.5
        return np.where(left, _left(x, y, d), _right(x, y, d))

    def exact(pts):
        return _piecewise(pts, "u")

    def grad(pts):
        return np.stack([_piecewise(pts, "gx"), _piecewise(pts, "gy")], axis=1)

    def f(pts):
        x, y = _pts(pts)
        left = x <= 0.5
        out = np.empty_like(x)
        for mask, side in ((left, _left), (~left, _right)):
            uxx, uxy, uyy = side(x[mask], y[mask], "dd")
            out[mask] = -(K2[0, 0] * uxx + (K2[0, 1] + K2[1, 0]) * uxy
                          + K2[1, 1] * uyy)
        return out

    return DiffusionProblem(K2, f, exact, exact=exact, exact_grad=grad,
                            name="test2")


PRESETS = {"poisson": poisson, "test1": test1, "test2": test2}


def save_solution(path, u):
    """VEMSOL v1: magic, dof count, one dof per line."""
    with open(path, "w") as fh:
        fh.write("VEMSOL v1\n%d\n" % len(u))
        for val in np.asarray(u, dtype=float):
            fh.write("%.17g\n" % val)


def load_solution(path):
    try:
        fh = open(path)
    except FileNotFoundError:
        raise MissingFile("no such file: %s" % path)
    with fh:
        lines = [ln.strip() for ln in fh]
    if not lines or lines[0] != "VEMSOL v1":
        raise ParseError("%s: line 1: expected 'VEMSOL v1'" % path)
    try:
        n = int(lines[1])
        u = np.array([float(x) for x in lines[2:2 + n]])
    except (IndexError, ValueError) as exc:
        raise ParseError("%s: malformed solution file: %s" % (path, exc))
    if len(u) != n:
        raise ParseError("%s: expected %d dofs, found %d" % (path, n, len(u)))
    return u
