"""P1 finite elements on structured fan-lattice triangulations of polygons.

A polygon with star center c is triangulated by splitting every fan triangle
(v_i, v_{i+1}, c) into a barycentric lattice of 4^level congruent copies.
Because the lattice is combinatorial, two polygons with the same vertex count
and level get *identical* node numbering, and any map that is affine on each
fan triangle sends nodes of one mesh onto nodes of the other one-to-one.  The
reduced-basis pipeline leans on this: snapshot transfer between a physical
polygon and the reference polygon is exact nodal identification.
"""

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu, cg, LinearOperator

from .errors import InvalidArgument, ResourceLimit, SolverFailure
from .geometry import _fan_index

MAX_NODES = 2_000_000
DIRECT_LIMIT = 400_000  # above this many interior nodes, fall back to CG


class TriMesh:
    """Fan-lattice triangulation of a star-shaped polygon.

    Attributes:
        polygon: the Polygon that was triangulated.
        nodes: (nn, 2) coordinates.
        tris: (nt, 3) CCW connectivity.
        boundary: (nn,) bool mask of polygon-boundary nodes.
        fan_of_tri: (nt,) fan triangle index of each fine triangle.
        bedge, bfrac: polygon edge index and edge parameter of each boundary
            node (-1 / 0 elsewhere); the vertex v_e has bedge=e, bfrac=0.
        level: subdivision level, edge split into m = 2^level parts.
    """

    __slots__ = ("polygon", "nodes", "tris", "boundary", "fan_of_tri",
                 "bedge", "bfrac", "level", "m", "_grid", "_inv", "_quad")

    def __init__(self, polygon, nodes, tris, boundary, fan_of_tri,
                 bedge, bfrac, level, grid, inv):
        self.polygon = polygon
        self.nodes = nodes
        self.tris = tris
        self.boundary = boundary
        self.fan_of_tri = fan_of_tri
        self.bedge = bedge
        self.bfrac = bfrac
        self.level = level
        self.m = 2 ** level
        self._grid = grid
        self._inv = inv
        self._quad = None

    @property
    def nnodes(self):
        return len(self.nodes)

    @property
    def ntris(self):
        return len(self.tris)

    def __repr__(self):
        return "TriMesh(n=%d, level=%d, nodes=%d)" % (self.polygon.n, self.level, self.nnodes)


def lattice_node_count(n, level):
    m = 2 ** level
    return 1 + n * m + n * (m - 1) + n * (m - 1) * (m - 2) // 2


def level_for_delta(p, delta):
    """Smallest level whose fine edges are all <= delta."""
    if delta <= 0.0:
        raise InvalidArgument("delta must be positive")
    v = p.vertices
    c = p.star_center
    e1 = np.sqrt(((v - c) ** 2).sum(1))
    e2 = np.sqrt(((np.roll(v, -1, axis=0) - v) ** 2).sum(1))
    longest = max(e1.max(), e2.max())
    return max(0, int(np.ceil(np.log2(longest / delta)))) if longest > delta else 0


def triangulate(p, delta=None, level=None):
    """Fan-lattice mesh of polygon p; pass either a target edge size delta or
    an explicit subdivision level (level wins if both are given)."""
    if level is None:
        if delta is None:
            raise InvalidArgument("need delta or level")
        level = level_for_delta(p, delta)
    level = int(level)
    if level < 0:
        raise InvalidArgument("level must be >= 0")
    n = p.n
    if lattice_node_count(n, level) > MAX_NODES:
        raise ResourceLimit("mesh would have %d nodes (cap %d)"
                            % (lattice_node_count(n, level), MAX_NODES))
    m = 2 ** level
    v = p.vertices
    c = p.star_center
    registry = {}
    coords = []
    bnd = []
    be = []
    bf = []

    def node_id(key, xy, edge, frac):
        idx = registry.get(key)
        if idx is None:
            idx = len(coords)
            registry[key] = idx
            coords.append(xy)
            bnd.append(edge >= 0)
            be.append(edge)
            bf.append(frac)
        return idx

    grid = [np.full((m + 1, m + 1), -1, dtype=np.int64) for _ in range(n)]
    for i in range(n):
        a = (v[i] - c) / m
        b = (v[(i + 1) % n] - c) / m
        g = grid[i]
        for s in range(m + 1):
            for t in range(m + 1 - s):
                if s == 0 and t == 0:
                    key = ("c",)
                    edge, frac = -1, 0.0
                elif t == 0:
                    key = ("r", i, s)
                    edge, frac = (i, 0.0) if s == m else (-1, 0.0)
                elif s == 0:
                    key = ("r", (i + 1) % n, t)
                    edge, frac = ((i + 1) % n, 0.0) if t == m else (-1, 0.0)
                elif s + t == m:
                    key = ("e", i, t)
                    edge, frac = i, t / m
                else:
                    key = ("i", i, s, t)
                    edge, frac = -1, 0.0
                g[s, t] = node_id(key, c + s * a + t * b, edge, frac)
    tris = np.empty((n * m * m, 3), dtype=np.int64)
    fan_of = np.empty(n * m * m, dtype=np.int64)
    k = 0
    for i in range(n):
        g = grid[i]
        for s in range(m):
            for t in range(m - s):
                tris[k] = (g[s, t], g[s + 1, t], g[s, t + 1])
                fan_of[k] = i
                k += 1
                if s + t <= m - 2:
                    tris[k] = (g[s + 1, t], g[s + 1, t + 1], g[s, t + 1])
                    fan_of[k] = i
                    k += 1
    # per-fan inverse frames for point location
    inv = np.empty((n, 2, 2))
    for i in range(n):
        E = np.column_stack([v[i] - c, v[(i + 1) % n] - c])
        det = E[0, 0] * E[1, 1] - E[0, 1] * E[1, 0]
        inv[i] = np.array([[E[1, 1], -E[0, 1]], [-E[1, 0], E[0, 0]]]) / det
    return TriMesh(p, np.array(coords), tris, np.array(bnd, dtype=bool),
                   fan_of, np.array(be, dtype=np.int64), np.array(bf),
                   level, grid, inv)


class FEField:
    """Nodal P1 field on a TriMesh."""

    __slots__ = ("mesh", "values")

    def __init__(self, mesh, values):
        self.mesh = mesh
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != (mesh.nnodes,):
            raise InvalidArgument("values must have one entry per node")


def tri_geometry(nodes, tris):
    """Areas and P1 hat gradients: G[t, r] = grad of hat r on triangle t."""
    p0 = nodes[tris[:, 0]]
    p1 = nodes[tris[:, 1]]
    p2 = nodes[tris[:, 2]]
    e1 = p1 - p0
    e2 = p2 - p0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area = 0.5 * det
    if area.min() <= 0.0:
        raise InvalidArgument("triangulation contains a non-CCW triangle")
    G = np.empty((len(tris), 3, 2))
    # grad of hat_i is the clockwise perpendicular of the opposite edge / 2A
    for r, (aa, bb) in enumerate(((1, 2), (2, 0), (0, 1))):
        opp = nodes[tris[:, aa]] - nodes[tris[:, bb]]
        G[:, r, 0] = opp[:, 1]
        G[:, r, 1] = -opp[:, 0]
    G /= (2.0 * area)[:, None, None]
    return area, G


def assemble_stiffness(mesh_or_nodes, tris_or_K=None, K=None):
    """CSR stiffness with trial on columns: A[r, c] = sum_T |T| (K g_c) . g_r.

    Call as assemble_stiffness(mesh, K) or assemble_stiffness(nodes, tris, K);
    K may be None (identity), a 2x2 tensor, or per-triangle (nt, 2, 2).
    """
    if isinstance(mesh_or_nodes, TriMesh):
        nodes, tris = mesh_or_nodes.nodes, mesh_or_nodes.tris
        K = tris_or_K
    else:
        nodes, tris = np.asarray(mesh_or_nodes, dtype=float), np.asarray(tris_or_K)
    area, G = tri_geometry(nodes, tris)
    if K is None:
        loc = np.einsum("t,trx,tcx->trc", area, G, G)
    else:
        K = np.asarray(K, dtype=float)
        if K.shape == (2, 2):
            loc = np.einsum("t,trx,xy,tcy->trc", area, G, K, G)
        else:
            loc = np.einsum("t,trx,txy,tcy->trc", area, G, K, G)
    rows = np.broadcast_to(tris[:, :, None], (len(tris), 3, 3))
    cols = np.broadcast_to(tris[:, None, :], (len(tris), 3, 3))
    A = coo_matrix((loc.ravel(), (rows.ravel(), cols.ravel())),
                   shape=(len(nodes), len(nodes)))
    return A.tocsr()


class DirichletSolver:
    """Factorized interior solver for repeated Dirichlet solves on one mesh."""

    def __init__(self, mesh, K=None, matrix=None):
        self.mesh = mesh
        self.A = assemble_stiffness(mesh, K) if matrix is None else matrix
        self.interior = np.where(~mesh.boundary)[0]
        self.bidx = np.where(mesh.boundary)[0]
        Ai = self.A[self.interior]
        self.Aii = Ai[:, self.interior].tocsc()
        self.Aib = Ai[:, self.bidx].tocsr()
        self._lu = None
        self._diag = None
        if len(self.interior) == 0:
            pass
        elif len(self.interior) <= DIRECT_LIMIT:
            self._lu = splu(self.Aii)
        else:
            self._diag = self.Aii.diagonal()

    def solve(self, boundary_values=None, load=None):
        """Nodal solution with the given Dirichlet data (full-length vector or
        boundary-only values are both accepted) and optional interior load."""
        nn = self.mesh.nnodes
        u = np.zeros(nn)
        if boundary_values is not None:
            bv = np.asarray(boundary_values, dtype=float)
            u[self.bidx] = bv[self.bidx] if bv.shape == (nn,) else bv
        if len(self.interior) == 0:
            return u
        rhs = np.zeros(len(self.interior))
        if load is not None:
            rhs += np.asarray(load, dtype=float)[self.interior]
        if boundary_values is not None:
            rhs -= self.Aib @ u[self.bidx]
        bnorm = np.linalg.norm(rhs)
        if bnorm == 0.0:
            return u
        if self._lu is not None:
            x = self._lu.solve(rhs)
        else:
            d = np.where(self._diag > 0, self._diag, 1.0)
            M = LinearOperator(self.Aii.shape, matvec=lambda y: y / d)
            x, info = cg(self.Aii, rhs, rtol=1e-13, atol=0.0, maxiter=100000, M=M)
            if info != 0:
                raise SolverFailure("CG did not converge (info=%d)" % info)
        res = np.linalg.norm(self.Aii @ x - rhs) / bnorm
        if res > 1e-12:
            raise SolverFailure("Dirichlet solve residual %.3e" % res)
        u[self.interior] = x
        return u


def solve_dirichlet(mesh, K, boundary_values, load=None, solver=None):
    if solver is None:
        solver = DirichletSolver(mesh, K)
    return solver.solve(boundary_values, load=load)


def boundary_values_from_dofs(mesh, dofs):
    """Piecewise linear boundary trace with the given vertex values."""
    dofs = np.asarray(dofs, dtype=float)
    if dofs.shape != (mesh.polygon.n,):
        raise InvalidArgument("one dof per polygon vertex")
    vals = np.zeros(mesh.nnodes)
    b = mesh.boundary
    e = mesh.bedge[b]
    t = mesh.bfrac[b]
    vals[b] = (1.0 - t) * dofs[e] + t * dofs[(e + 1) % mesh.polygon.n]
    return vals


def vem_basis_fe(p, j, delta=None, level=None, solver=None):
    """Fine FE approximation of the j-th harmonic vertex basis function."""
    if solver is None:
        mesh = triangulate(p, delta=delta, level=level)
        solver = DirichletSolver(mesh, None)
    dofs = np.zeros(solver.mesh.polygon.n)
    dofs[j] = 1.0
    vals = solver.solve(boundary_values_from_dofs(solver.mesh, dofs))
    return FEField(solver.mesh, vals)


def vem_basis_all(p, delta=None, level=None):
    """All vertex basis functions from a single factorization.

    Returns (mesh, (n, nn) array of nodal values)."""
    mesh = triangulate(p, delta=delta, level=level)
    solver = DirichletSolver(mesh, None)
    out = np.empty((p.n, mesh.nnodes))
    for j in range(p.n):
        dofs = np.zeros(p.n)
        dofs[j] = 1.0
        out[j] = solver.solve(boundary_values_from_dofs(mesh, dofs))
    return mesh, out


def interpolate(mesh, values, points, tol=1e-6):
    """Evaluate a nodal field at arbitrary points of the polygon.

    Uses the fan/lattice structure for O(1) location per point.  Points
    farther outside than a small lattice tolerance raise invalid-argument.
    """
    values = np.asarray(values, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    fan = _fan_index(mesh.polygon, pts)
    q = pts - mesh.polygon.star_center
    frac = np.einsum("kij,kj->ki", mesh._inv[fan], q)
    lat = frac * mesh.m
    s, t = lat[:, 0].copy(), lat[:, 1].copy()
    for arr in (s, t):
        low = arr < 0.0
        if low.any():
            if arr[low].min() < -tol:
                raise InvalidArgument("point outside polygon")
            arr[low] = 0.0
    over = s + t > mesh.m
    if over.any():
        tot = (s + t)[over]
        if tot.max() > mesh.m * (1.0 + tol):
            raise InvalidArgument("point outside polygon")
        scale = mesh.m / tot
        s[over] *= scale
        t[over] *= scale
    s0 = np.minimum(s.astype(np.int64), mesh.m - 1)
    t0 = np.minimum(t.astype(np.int64), mesh.m - 1)
    # clamp so the up/down cell (s0, t0) stays inside the lattice
    t0 = np.minimum(t0, mesh.m - 1 - s0)
    fu = s - s0
    fv = t - t0
    # cells on the hypotenuse strip have no down twin; rounding can push
    # fu+fv a hair over 1 there, which the up weights absorb
    down = (fu + fv > 1.0) & (s0 + t0 < mesh.m - 1)
    out = np.empty(len(pts))
    for i in np.unique(fan):
        g = mesh._grid[i]
        sel = np.where(fan == i)[0]
        a, b, dn = s0[sel], t0[sel], down[sel]
        i0 = np.where(dn, g[np.minimum(a + 1, mesh.m), b],
                      g[a, b])
        i1 = np.where(dn, g[np.minimum(a + 1, mesh.m), np.minimum(b + 1, mesh.m)],
                      g[np.minimum(a + 1, mesh.m), b])
        i2 = g[a, np.minimum(b + 1, mesh.m)]
        w0 = np.where(dn, 1.0 - fv[sel], 1.0 - fu[sel] - fv[sel])
        w1 = np.where(dn, fu[sel] + fv[sel] - 1.0, fu[sel])
        w2 = np.where(dn, 1.0 - fu[sel], fv[sel])
        out[sel] = w0 * values[i0] + w1 * values[i1] + w2 * values[i2]
    return out if np.asarray(points).ndim == 2 else out[0]


def interpolate_scan(mesh, values, points, tol=1e-9):
    """Brute-force point location; slow reference path for testing."""
    values = np.asarray(values, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.full(len(pts), np.nan)
    p0 = mesh.nodes[mesh.tris[:, 0]]
    p1 = mesh.nodes[mesh.tris[:, 1]]
    p2 = mesh.nodes[mesh.tris[:, 2]]
    det = (p1 - p0)[:, 0] * (p2 - p0)[:, 1] - (p1 - p0)[:, 1] * (p2 - p0)[:, 0]
    for k, q in enumerate(pts):
        d = q - p0
        l1 = ((p2 - p0)[:, 1] * d[:, 0] - (p2 - p0)[:, 0] * d[:, 1]) / det
        l2 = (-(p1 - p0)[:, 1] * d[:, 0] + (p1 - p0)[:, 0] * d[:, 1]) / det
        ok = (l1 >= -tol) & (l2 >= -tol) & (l1 + l2 <= 1.0 + tol)
        idx = np.where(ok)[0]
        if len(idx) == 0:
            raise InvalidArgument("point outside mesh")
        tri = mesh.tris[idx[0]]
        w = np.array([1.0 - l1[idx[0]] - l2[idx[0]], l1[idx[0]], l2[idx[0]]])
        out[k] = w @ values[tri]
    return out if np.asarray(points).ndim == 2 else out[0]


def _quad(mesh):
    if mesh._quad is None:
        area, G = tri_geometry(mesh.nodes, mesh.tris)
        tri = mesh.tris
        qp = np.empty((len(tri), 3, 2))
        for k, (aa, bb) in enumerate(((0, 1), (1, 2), (2, 0))):
            qp[:, k] = 0.5 * (mesh.nodes[tri[:, aa]] + mesh.nodes[tri[:, bb]])
        mesh._quad = (area, G, qp)
    return mesh._quad


def integrate(mesh, fn):
    """Degree-2 (edge midpoint) quadrature of a callable over the mesh."""
    area, _, qp = _quad(mesh)
    vals = fn(qp[:, :, 0], qp[:, :, 1])
    return float((area / 3.0 * np.asarray(vals).sum(1)).sum())


def _field_at_qp(mesh, vals):
    tri = mesh.tris
    out = np.empty((len(tri), 3))
    for k, (aa, bb) in enumerate(((0, 1), (1, 2), (2, 0))):
        out[:, k] = 0.5 * (vals[tri[:, aa]] + vals[tri[:, bb]])
    return out


def error_norms_vs(mesh, vals, exact=None, exact_grad=None, K=None):
    """Error and reference norms of a nodal field against a callable.

    exact(x, y) and exact_grad(x, y) (returning (gx, gy)) are evaluated at the
    degree-2 quadrature points; with exact None the field itself is measured.
    Returns a dict with err_l2/err_h1/err_en/err_inf and ref_* counterparts
    (squares not taken; h1 is the seminorm part, en uses sym(K)).
    """
    vals = np.asarray(vals, dtype=float)
    area, G, qp = _quad(mesh)
    w = area[:, None] / 3.0
    Ks = np.eye(2) if K is None else 0.5 * (np.asarray(K, dtype=float)
                                            + np.asarray(K, dtype=float).T)
    uq = _field_at_qp(mesh, vals)
    gh = np.einsum("tr,trx->tx", vals[mesh.tris], G)
    if exact is None:
        eq = np.zeros_like(uq)
        gq = None
        enode = np.zeros(mesh.nnodes)
    else:
        if exact_grad is None:
            raise InvalidArgument("exact_grad required alongside exact")
        eq = exact(qp[:, :, 0], qp[:, :, 1])
        enode = exact(mesh.nodes[:, 0], mesh.nodes[:, 1])
        gx, gy = exact_grad(qp[:, :, 0], qp[:, :, 1])
        gq = np.stack([gx, gy], axis=-1)
    out = {}
    out["err_l2"] = float(np.sqrt((w * (uq - eq) ** 2).sum()))
    out["ref_l2"] = float(np.sqrt((w * eq ** 2).sum()))
    if gq is not None:
        diff = gh[:, None, :] - gq
        out["err_h1"] = float(np.sqrt((w * np.einsum("tqx,tqx->tq", diff, diff)).sum()))
        out["err_en"] = float(np.sqrt((w * np.einsum("tqx,xy,tqy->tq", diff, Ks, diff)).sum()))
        out["ref_h1"] = float(np.sqrt((w * np.einsum("tqx,tqx->tq", gq, gq)).sum()))
        out["ref_en"] = float(np.sqrt((w * np.einsum("tqx,xy,tqy->tq", gq, Ks, gq)).sum()))
    else:
        gg = np.einsum("tx,tx->t", gh, gh)
        ge = np.einsum("tx,xy,ty->t", gh, Ks, gh)
        out["err_h1"] = float(np.sqrt((area * gg).sum()))
        out["err_en"] = float(np.sqrt((area * ge).sum()))
        out["ref_h1"] = 0.0
        out["ref_en"] = 0.0
    out["err_inf"] = float(np.abs(vals - enode).max())
    out["ref_inf"] = float(np.abs(enode).max()) if exact is not None else 0.0
    return out


def h1_norm(mesh, vals, K=None):
    """(l2, h1semi, energy, linf) of a nodal field."""
    r = error_norms_vs(mesh, vals, None, None, K=K)
    return r["err_l2"], r["err_h1"], r["err_en"], r["err_inf"]
