"""Offline reduced-basis pipeline.

For each vertex count n: solve the harmonic vertex-basis problems of many
training polygons on matched fan lattices, identify the solutions nodally
with the reference lattice (the piecewise affine map preserves barycentric
lattice coordinates, so no interpolation error enters), subtract the
reference harmonic liftings, and compress the stacked deviations with a POD.
Reference-side integrals of the basis against the 2x2 tensor basis are
precomputed per fan triangle ("bricks") so the online stage assembles
reduced systems with a handful of scalar coefficients.
"""

import hashlib
import logging
import os

import numpy as np
from scipy.sparse import coo_matrix

from .errors import DatabaseError, InvalidArgument, SolverFailure, VemrbError
from .femcore import (DirichletSolver, boundary_values_from_dofs,
                      tri_geometry, triangulate)
from .geometry import TENSOR_BASIS, reference_polygon

log = logging.getLogger(__name__)

SPRODUCT_TAG = "h1-seminorm"


def jacobi_eigh(A, tol=1e-12, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps the strict upper triangle, annihilating each entry with the
    classical small-angle rotation (|phi| <= pi/4, so diagonal entries never
    swap and the off-diagonal mass decreases monotonically), until the
    off-diagonal Frobenius norm drops below tol (absolute).  Returns
    (eigenvalues, column eigenvectors) in canonical order: descending
    eigenvalues, each vector signed so its largest-magnitude entry is
    positive, ties (< 1e-14) broken by that entry's position.
    """
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidArgument("matrix must be square")
    if np.abs(A - A.T).max() > 1e-12 * max(1.0, np.abs(A).max()):
        raise InvalidArgument("matrix must be symmetric")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    if n == 1:
        return A[0, :1].copy(), V
    for _ in range(max_sweeps):
        # sum the off-diagonal squares directly: the difference
        # ||A||_F^2 - ||diag||^2 cancels catastrophically near convergence
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                if tau == 0.0:
                    t = 1.0
                else:
                    t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                Ap, Aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * Ap - s * Aq
                A[:, q] = s * Ap + c * Aq
                Ap, Aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * Ap - s * Aq
                A[q, :] = s * Ap + c * Aq
                Vp, Vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * Vp - s * Vq
                V[:, q] = s * Vp + c * Vq
    else:
        raise SolverFailure("Jacobi sweep cap reached (off-diagonal %.3e)" % off)
    return _canonical_eigh(np.diag(A).copy(), V)


def _canonical_eigh(lam, V, tie_tol=1e-14):
    cols = np.arange(V.shape[1])
    dom = np.abs(V).argmax(axis=0)  # argmax takes the smallest index on ties
    signs = np.where(V[dom, cols] < 0.0, -1.0, 1.0)
    V = V * signs
    order = sorted(cols, key=lambda k: -lam[k])
    # reorder runs of equal eigenvalues by the dominant-entry position
    out = []
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and abs(lam[order[j + 1]] - lam[order[i]]) < tie_tol:
            j += 1
        out.extend(sorted(order[i:j + 1], key=lambda k: dom[k]))
        i = j + 1
    out = np.array(out)
    return lam[out], V[:, out]


def reference_setup(n, level):
    """Reference mesh, harmonic liftings (one per vertex), interior index."""
    mesh = triangulate(reference_polygon(n), level=level)
    solver = DirichletSolver(mesh, None)
    lift = np.empty((n, mesh.nnodes))
    for j in range(n):
        dofs = np.zeros(n)
        dofs[j] = 1.0
        lift[j] = solver.solve(boundary_values_from_dofs(mesh, dofs))
    return mesh, lift, solver.interior


def snapshot_columns(p, ref_mesh, liftings, interior):
    """Deviation snapshots d_j of one training polygon, interior values only.

    The polygon is triangulated at the reference level; its lattice nodes
    correspond one-to-one with the reference nodes, so pulling the solution
    back along the fan map is plain nodal identification.
    """
    if p.n != ref_mesh.polygon.n:
        raise InvalidArgument("vertex count differs from reference")
    mesh = triangulate(p, level=ref_mesh.level)
    solver = DirichletSolver(mesh, None)
    n = p.n
    out = np.empty((n, len(interior)))
    for j in range(n):
        dofs = np.zeros(n)
        dofs[j] = 1.0
        ej = solver.solve(boundary_values_from_dofs(mesh, dofs))
        out[j] = ej[interior] - liftings[j][interior]
    return out


class SnapshotSet:
    """Stacked training deviations: U[:, k] is polygon k's (d_1; ...; d_n)."""

    __slots__ = ("n", "ref_mesh", "liftings", "interior", "U", "skipped")

    def __init__(self, n, ref_mesh, liftings, interior, U, skipped=0):
        self.n = n
        self.ref_mesh = ref_mesh
        self.liftings = liftings
        self.interior = interior
        self.U = U
        self.skipped = skipped

    @property
    def P(self):
        return self.U.shape[1]


def collect_snapshots(n, polygons, level):
    ref_mesh, lift, interior = reference_setup(n, level)
    cols = []
    skipped = 0
    for k, p in enumerate(polygons):
        try:
            cols.append(snapshot_columns(p, ref_mesh, lift, interior).ravel())
        except VemrbError as exc:
            skipped += 1
            log.warning("skipping training polygon %d: %s", k, exc)
    if not cols:
        raise DatabaseError("no usable training polygons")
    U = np.array(cols).T.copy()
    return SnapshotSet(n, ref_mesh, lift, interior, U, skipped=skipped)


def interior_stiffness(ref_mesh, interior):
    from .femcore import assemble_stiffness
    A = assemble_stiffness(ref_mesh, None)
    return A[interior][:, interior].tocsr()


def pod(snaps, mmax):
    """Stacked POD of the snapshot set under the H1-seminorm product.

    Returns (eigenvalues, xi) with xi[j, l] the interior values of the l-th
    reduced basis function attached to vertex j, xi = (1/sqrt(P)) U z_l.
    """
    P = snaps.P
    mmax = min(mmax, P)
    S = interior_stiffness(snaps.ref_mesh, snaps.interior)
    nint = len(snaps.interior)
    U3 = snaps.U.reshape(snaps.n, nint, P)
    C = np.zeros((P, P))
    for j in range(snaps.n):
        C += U3[j].T @ (S @ U3[j])
    C /= P
    lam, Z = jacobi_eigh(C)
    xi = np.einsum("jnp,pl->jln", U3, Z[:, :mmax]) / np.sqrt(P)
    return lam, xi


def numerical_rank(eigenvalues, rel=1e-10):
    lam = np.asarray(eigenvalues, dtype=float)
    if len(lam) == 0 or lam[0] <= 0.0:
        return 0
    return int((lam > rel * lam[0]).sum())


def fan_tensor_matrices(ref_mesh):
    """Sparse stiffness of each (fan, tensor-basis) pair, trial on columns."""
    area, G = tri_geometry(ref_mesh.nodes, ref_mesh.tris)
    nn = ref_mesh.nnodes
    tris = ref_mesh.tris
    out = []
    for i in range(ref_mesh.polygon.n):
        mask = ref_mesh.fan_of_tri == i
        t = tris[mask]
        rows = np.broadcast_to(t[:, :, None], (len(t), 3, 3)).ravel()
        cols = np.broadcast_to(t[:, None, :], (len(t), 3, 3)).ravel()
        row_mats = []
        for nu in range(4):
            loc = np.einsum("t,trx,xy,tcy->trc", area[mask], G[mask],
                            TENSOR_BASIS[nu], G[mask])
            Q = coo_matrix((loc.ravel(), (rows, cols)), shape=(nn, nn)).tocsr()
            row_mats.append(Q)
        out.append(row_mats)
    return out


def compute_bricks(ref_mesh, liftings, xi, interior):
    """Per-fan integrals of basis and lifting gradients against the tensor
    basis.  Index convention: the first (j, l) pair rides the tensor (trial
    side), the second is the test side.

    Returns (brick_a, brick_f, brick_g) with shapes
    (n, 4, n, n, M, M), (n, 4, n, n, M), (n, 4, n, n).
    """
    n = ref_mesh.polygon.n
    M = xi.shape[1]
    nn = ref_mesh.nnodes
    X = np.zeros((nn, n * M))
    for j in range(n):
        X[interior, j * M:(j + 1) * M] = xi[j].T
    L = liftings.T  # (nn, n)
    brick_a = np.empty((n, 4, n, n, M, M))
    brick_f = np.empty((n, 4, n, n, M))
    brick_g = np.empty((n, 4, n, n))
    for i, row in enumerate(fan_tensor_matrices(ref_mesh)):
        for nu, Q in enumerate(row):
            QX = Q @ X
            QL = Q @ L
            TA = X.T @ QX  # [(j', l'), (j, l)]
            brick_a[i, nu] = TA.reshape(n, M, n, M).transpose(2, 0, 3, 1)
            TF = L.T @ QX  # [j', (j, l)]
            brick_f[i, nu] = TF.reshape(n, n, M).transpose(1, 0, 2)
            brick_g[i, nu] = (L.T @ QL).T
    return brick_a, brick_f, brick_g


class RBDatabase:
    """Trained reduced-basis data for one vertex count."""

    def __init__(self, n, level, mmax, seed, delta, eigenvalues, ref_mesh,
                 interior, liftings, basis, brick_a, brick_f, brick_g,
                 trained_P, skipped=0):
        self.n = n
        self.level = level
        self.mmax = mmax
        self.seed = seed
        self.delta = delta
        self.eigenvalues = eigenvalues
        self.ref_mesh = ref_mesh
        self.interior = interior
        self.liftings = liftings
        self.basis = basis  # (n, mmax, n_interior)
        self.brick_a = brick_a
        self.brick_f = brick_f
        self.brick_g = brick_g
        self.trained_P = trained_P
        self.skipped = skipped
        self._adiag = None
        self._fdiag = None
        self._basis_full = None

    @property
    def adiag(self):
        """(n, 4, n, M, M) view A_i^nu(j, j, :, :), built on first use."""
        if self._adiag is None:
            j = np.arange(self.n)
            self._adiag = np.ascontiguousarray(self.brick_a[:, :, j, j])
        return self._adiag

    @property
    def fdiag(self):
        if self._fdiag is None:
            j = np.arange(self.n)
            self._fdiag = np.ascontiguousarray(self.brick_f[:, :, j, j])
        return self._fdiag

    def basis_full(self):
        """(n, M, nn) basis with zero boundary rows restored."""
        if self._basis_full is None:
            full = np.zeros((self.n, self.mmax, self.ref_mesh.nnodes))
            full[:, :, self.interior] = self.basis
            self._basis_full = full
        return self._basis_full

    def truncate(self, m):
        """Database restricted to the first m basis functions (shared data)."""
        if m > self.mmax:
            raise DatabaseError("database holds M_max=%d < %d" % (self.mmax, m))
        if m == self.mmax:
            return self
        return RBDatabase(self.n, self.level, m, self.seed, self.delta,
                          self.eigenvalues, self.ref_mesh, self.interior,
                          self.liftings, np.ascontiguousarray(self.basis[:, :m]),
                          np.ascontiguousarray(self.brick_a[..., :m, :m]),
                          np.ascontiguousarray(self.brick_f[..., :m]),
                          self.brick_g, self.trained_P, self.skipped)


def train_database(n, polygons, mmax, level=None, delta=None, seed=0):
    """Full offline phase for one vertex count on a list of normalized
    training polygons."""
    ref = reference_polygon(n)
    if level is None:
        if delta is None:
            raise InvalidArgument("need level or delta")
        from .femcore import level_for_delta
        level = level_for_delta(ref, delta)
    snaps = collect_snapshots(n, polygons, level)
    mmax = min(mmax, snaps.P)
    lam, xi = pod(snaps, mmax)
    brick_a, brick_f, brick_g = compute_bricks(snaps.ref_mesh, snaps.liftings,
                                               xi, snaps.interior)
    edges = snaps.ref_mesh.nodes[snaps.ref_mesh.tris] \
        - snaps.ref_mesh.nodes[np.roll(snaps.ref_mesh.tris, -1, axis=1)]
    achieved = float(np.sqrt((edges ** 2).sum(-1)).max())
    return RBDatabase(n, level, mmax, seed,
                      delta if delta is not None else achieved,
                      lam, snaps.ref_mesh, snaps.interior, snaps.liftings, xi,
                      brick_a, brick_f, brick_g, snaps.P, snaps.skipped)


# ---------------------------------------------------------------- database IO

_ARRAYS = ("nodes", "tris", "boundary", "fan_of_tri", "liftings",
           "eigenvalues", "basis", "brick_a", "brick_f", "brick_g")


def _array_bytes(a):
    return np.ascontiguousarray(np.asarray(a, dtype=float)).astype("<f8").tobytes()


def save_db(db, dirpath):
    """Write one vertex count's database directory (manifest + flat arrays,
    little-endian float64, row-major)."""
    os.makedirs(dirpath, exist_ok=True)
    arrays = {
        "nodes": db.ref_mesh.nodes,
        "tris": db.ref_mesh.tris,
        "boundary": db.ref_mesh.boundary,
        "fan_of_tri": db.ref_mesh.fan_of_tri,
        "liftings": db.liftings,
        "eigenvalues": db.eigenvalues,
        "basis": db.basis,
        "brick_a": db.brick_a,
        "brick_f": db.brick_f,
        "brick_g": db.brick_g,
    }
    lines = ["RBDB v1",
             "n=%d" % db.n,
             "P=%d" % db.trained_P,
             "M_max=%d" % db.mmax,
             "delta=%.17g" % db.delta,
             "level=%d" % db.level,
             "seed=%d" % db.seed,
             "sproduct=%s" % SPRODUCT_TAG]
    for name in _ARRAYS:
        data = _array_bytes(arrays[name])
        with open(os.path.join(dirpath, name + ".f64"), "wb") as fh:
            fh.write(data)
        shape = ",".join(str(s) for s in np.asarray(arrays[name]).shape)
        lines.append("array %s shape=(%s) sha256=%s"
                     % (name, shape, hashlib.sha256(data).hexdigest()))
    with open(os.path.join(dirpath, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_db(dirpath, m=None):
    """Load a database directory; m truncates the basis and bricks."""
    man = os.path.join(dirpath, "manifest.txt")
    if not os.path.isdir(dirpath) or not os.path.exists(man):
        raise DatabaseError("no database at %s" % dirpath)
    with open(man) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "RBDB v1":
        raise DatabaseError("%s: expected 'RBDB v1'" % man)
    head = {}
    specs = []
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("array "):
            toks = line.split()
            name = toks[1]
            shape = tuple(int(s) for s in toks[2][len("shape=("):-1].split(",") if s)
            sha = toks[3][len("sha256="):]
            specs.append((name, shape, sha))
        else:
            k, v = line.split("=", 1)
            head[k] = v
    try:
        n = int(head["n"])
        P = int(head["P"])
        mmax = int(head["M_max"])
        delta = float(head["delta"])
        level = int(head["level"])
        seed = int(head["seed"])
    except (KeyError, ValueError) as exc:
        raise DatabaseError("%s: bad header (%s)" % (man, exc))
    if head.get("sproduct") != SPRODUCT_TAG:
        raise DatabaseError("%s: scalar-product tag %r not supported"
                            % (man, head.get("sproduct")))
    raw = {}
    for name, shape, sha in specs:
        path = os.path.join(dirpath, name + ".f64")
        if not os.path.exists(path):
            raise DatabaseError("missing array file %s" % path)
        with open(path, "rb") as fh:
            data = fh.read()
        if hashlib.sha256(data).hexdigest() != sha:
            raise DatabaseError("checksum mismatch in %s" % path)
        a = np.frombuffer(data, dtype="<f8").astype(float)
        expected = int(np.prod(shape)) if shape else 1
        if a.size != expected:
            raise DatabaseError("size mismatch in %s" % path)
        raw[name] = a.reshape(shape)
    for name in _ARRAYS:
        if name not in raw:
            raise DatabaseError("manifest lacks array %r" % name)
    # rebuild the combinatorial mesh structure, then adopt the stored
    # coordinates as authoritative
    mesh = triangulate(reference_polygon(n), level=level)
    if mesh.nnodes != len(raw["nodes"]):
        raise DatabaseError("stored mesh does not match level %d" % level)
    if not np.array_equal(mesh.tris, raw["tris"].astype(np.int64)):
        raise DatabaseError("stored connectivity does not match the lattice")
    if not np.array_equal(mesh.boundary, raw["boundary"].astype(bool)):
        raise DatabaseError("stored boundary mask does not match the lattice")
    if np.abs(mesh.nodes - raw["nodes"]).max() > 1e-9:
        raise DatabaseError("stored node coordinates drifted from the lattice")
    mesh.nodes[:] = raw["nodes"]
    mesh._quad = None
    interior = np.where(~mesh.boundary)[0]
    db = RBDatabase(n, level, mmax, seed, delta, raw["eigenvalues"], mesh,
                    interior, raw["liftings"], raw["basis"], raw["brick_a"],
                    raw["brick_f"], raw["brick_g"], P)
    if m is not None:
        db = db.truncate(m)
    return db


def open_database(root, n, m=None):
    """Databases live in per-N subdirectories of a root directory."""
    path = os.path.join(root, "n%d" % n)
    if not os.path.isdir(path):
        raise DatabaseError("no database for N=%d under %s" % (n, root))
    return load_db(path, m=m)


def save_database_root(dbs, root):
    for db in dbs:
        save_db(db, os.path.join(root, "n%d" % db.n))
