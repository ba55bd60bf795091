"""Polygon primitives: generation, normalization, and the piecewise affine map.

Polygons are stored CCW with an interior star center.  A "normalized" polygon
has unit diameter and its star center at the origin; that frame is what the
reduced-basis databases are trained in.  The piecewise affine map sends each
fan triangle (v_i, v_{i+1}, center) of a normalized polygon onto the matching
fan triangle of the regular reference polygon with the same vertex count.
"""

import numpy as np

from .errors import (DegenerateGeometry, GenerationFailure, InvalidArgument,
                     ParseError)

# vertices closer than DEGEN_TOL * diameter are considered coincident
DEGEN_TOL = 1e-12
# three consecutive generated vertices are rejected as collinear below this
COLLINEAR_TOL = 1e-10


def polygon_diameter(vertices):
    """Max pairwise vertex distance (equals the circumscribed-circle diameter
    for convex polygons)."""
    v = np.asarray(vertices, dtype=float)
    d = v[:, None, :] - v[None, :, :]
    return float(np.sqrt((d * d).sum(-1)).max())


def polygon_area(vertices):
    """Signed shoelace area; positive for CCW.  Computed in vertex-centered
    coordinates so small cells far from the origin do not lose digits."""
    v = np.asarray(vertices, dtype=float)
    v = v - v.mean(axis=0)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_centroid(vertices):
    vr = np.asarray(vertices, dtype=float)
    mid = vr.mean(axis=0)
    v = vr - mid
    xn, yn = np.roll(v[:, 0], -1), np.roll(v[:, 1], -1)
    cross = v[:, 0] * yn - xn * v[:, 1]
    a = 0.5 * cross.sum()
    if abs(a) < np.finfo(float).tiny:
        raise DegenerateGeometry("polygon has vanishing area")
    cx = ((v[:, 0] + xn) * cross).sum() / (6.0 * a)
    cy = ((v[:, 1] + yn) * cross).sum() / (6.0 * a)
    return np.array([cx, cy]) + mid


class Polygon:
    """CCW polygon with a star center from which the fan triangulation is valid.

    Attributes:
        vertices: (n, 2) float array, CCW, no repeated endpoint.
        star_center: (2,) point; every fan triangle (v_i, v_{i+1}, center)
            must have positive signed area.
        n: vertex count.
    """

    __slots__ = ("vertices", "star_center", "n", "_diameter")

    def __init__(self, vertices, star_center=None):
        v = np.array(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise InvalidArgument("vertices must be (n, 2) with n >= 3")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("non-finite vertex coordinate")
        self.vertices = v
        self.n = v.shape[0]
        self._diameter = polygon_diameter(v)
        if self._diameter == 0.0:
            raise InvalidArgument("all vertices coincide")
        gap = np.sqrt(((v - np.roll(v, -1, axis=0)) ** 2).sum(1))
        if gap.min() <= DEGEN_TOL * self._diameter:
            raise InvalidArgument("consecutive vertices coincide")
        if polygon_area(v) <= 0.0:
            raise InvalidArgument("vertices must be ordered CCW")
        c = polygon_centroid(v) if star_center is None else np.asarray(star_center, dtype=float)
        self.star_center = c
        # star condition: all fan triangles positively oriented
        e1 = v - c
        e2 = np.roll(v, -1, axis=0) - c
        fan2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if fan2.min() <= 0.0:
            raise InvalidArgument("star center does not see every edge")

    @property
    def diameter(self):
        return self._diameter

    @property
    def area(self):
        return polygon_area(self.vertices)

    def fan_areas(self):
        """Signed areas of the fan triangles (all positive by construction)."""
        v, c = self.vertices, self.star_center
        e1 = v - c
        e2 = np.roll(v, -1, axis=0) - c
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def __repr__(self):
        return "Polygon(n=%d, diameter=%.6g)" % (self.n, self._diameter)


def reference_polygon(n):
    """Regular n-gon of unit diameter: circumradius 1/2, centered at the
    origin, CCW, first vertex on the positive x axis."""
    if n < 3:
        raise InvalidArgument("need at least 3 vertices")
    th = 2.0 * np.pi * np.arange(n) / n
    v = 0.5 * np.stack([np.cos(th), np.sin(th)], axis=1)
    return Polygon(v, star_center=np.zeros(2))


def normalize(p):
    """Translate the star center to the origin and rescale to unit diameter.

    Returns (normalized polygon, center, scale) so that
    original = normalized * scale + center.  Idempotent to rounding.
    """
    c = p.star_center.copy()
    s = p.diameter
    v = (p.vertices - c) / s
    return Polygon(v, star_center=np.zeros(2)), c, s


def generate_convex_polygon(n, rng, max_tries=1000):
    """Random convex n-gon (Valtr construction), returned normalized.

    Draws sorted coordinate pools, splits each into two monotone chains,
    pairs the resulting increment sets at random and sorts the edge vectors
    by angle.  Draws with duplicate vertices or near-collinear consecutive
    edges are rejected and retried.
    """
    if n < 3:
        raise InvalidArgument("need at least 3 vertices")
    for _ in range(max_tries):
        v = _valtr(n, rng)
        # duplicate vertices: the angle sort can merge opposite tiny edges
        d = polygon_diameter(v)
        if d <= 0.0:
            continue
        gap = np.sqrt(((v - np.roll(v, -1, axis=0)) ** 2).sum(1))
        if gap.min() <= 1e-9 * d:
            continue
        e = np.roll(v, -1, axis=0) - v
        u = e / np.sqrt((e * e).sum(1))[:, None]
        un = np.roll(u, -1, axis=0)
        if (u[:, 0] * un[:, 1] - u[:, 1] * un[:, 0]).min() <= COLLINEAR_TOL:
            continue
        if polygon_area(v) <= 0.0:
            continue
        try:
            poly, _, _ = normalize(Polygon(v))
        except InvalidArgument:
            continue
        return poly
    raise GenerationFailure("no admissible %d-gon in %d draws" % (n, max_tries))


def _valtr(n, rng):
    xs = np.sort(rng.random(n))
    ys = np.sort(rng.random(n))
    dx = _chain_increments(xs, rng)
    dy = _chain_increments(ys, rng)
    rng.shuffle(dy)
    order = np.argsort(np.arctan2(dy, dx), kind="stable")
    return np.cumsum(np.stack([dx[order], dy[order]], axis=1), axis=0)


def _chain_increments(vals, rng):
    # split the interior values between an ascending and a descending chain;
    # increments then sum to zero by construction
    first, last = vals[0], vals[-1]
    mid = vals[1:-1]
    take = rng.random(mid.size) < 0.5
    up = np.concatenate(([first], mid[take], [last]))
    down = np.concatenate(([first], mid[~take], [last]))
    return np.concatenate([np.diff(up), -np.diff(down)])


class AffineMap:
    """Per-fan linear maps of a normalized polygon onto its reference n-gon.

    B[i] maps physical fan triangle i into the reference fan triangle i
    (both frames centered at the origin, so the map is purely linear);
    Binv[i] is its inverse, det_inv_abs[i] = 1/|det B[i]|.
    """

    __slots__ = ("polygon", "reference", "B", "Binv", "det_inv_abs")

    def __init__(self, polygon, reference, B, Binv, det_inv_abs):
        self.polygon = polygon
        self.reference = reference
        self.B = B
        self.Binv = Binv
        self.det_inv_abs = det_inv_abs


def build_affine_map(p):
    """Affine map structure for a normalized polygon.

    Requires the star center at the origin (call normalize first).  Raises
    DegenerateGeometry if any fan triangle is too flat for a stable inverse.
    """
    if np.abs(p.star_center).max() > 1e-12:
        raise InvalidArgument("polygon must be normalized (star center at origin)")
    ref = reference_polygon(p.n)
    v = p.vertices
    vh = ref.vertices
    n = p.n
    B = np.empty((n, 2, 2))
    Binv = np.empty((n, 2, 2))
    dia = np.empty(n)
    for i in range(n):
        j = (i + 1) % n
        P = np.column_stack([v[i], v[j]])     # physical pair
        Q = np.column_stack([vh[i], vh[j]])   # reference pair
        detP = P[0, 0] * P[1, 1] - P[0, 1] * P[1, 0]
        if abs(detP) <= 2.0 * DEGEN_TOL:
            raise DegenerateGeometry("fan triangle %d is degenerate" % i)
        Pinv = np.array([[P[1, 1], -P[0, 1]], [-P[1, 0], P[0, 0]]]) / detP
        Bi = Q @ Pinv
        B[i] = Bi
        detB = Bi[0, 0] * Bi[1, 1] - Bi[0, 1] * Bi[1, 0]
        Binv[i] = np.array([[Bi[1, 1], -Bi[0, 1]], [-Bi[1, 0], Bi[0, 0]]]) / detB
        dia[i] = 1.0 / abs(detB)
    amap = AffineMap(p, ref, B, Binv, dia)
    # postcondition: vertices land on reference vertices
    for i in range(n):
        j = (i + 1) % n
        if max(np.abs(B[i] @ v[i] - vh[i]).max(), np.abs(B[i] @ v[j] - vh[j]).max()) > 1e-12:
            raise DegenerateGeometry("affine map failed vertex check on fan %d" % i)
    return amap


# basis of 2x2 matrices used by the anisotropic decomposition:
# A1 = e1 e1^T, A2 = e2 e2^T, A3 symmetric off-diagonal, A4 antisymmetric
TENSOR_BASIS = np.array([
    [[1.0, 0.0], [0.0, 0.0]],
    [[0.0, 0.0], [0.0, 1.0]],
    [[0.0, 1.0], [1.0, 0.0]],
    [[0.0, 1.0], [-1.0, 0.0]],
])


def sym_coeffs(B, det_inv_abs):
    """Coefficients (c1, c2, c3) of d * B^T B in the symmetric part of the
    tensor basis: c1 = m11, c2 = m22, c3 = m12."""
    M = det_inv_abs * (np.asarray(B).T @ np.asarray(B))
    return np.array([M[0, 0], M[1, 1], M[0, 1]])


def full_coeffs(B, det_inv_abs, K):
    """Coefficients (c1, c2, c3, c4) of d * B^T K B in the full tensor basis:
    c3 carries the symmetric off-diagonal average, c4 the antisymmetric part."""
    Ba = np.asarray(B)
    M = det_inv_abs * (Ba.T @ np.asarray(K, dtype=float) @ Ba)
    return np.array([M[0, 0], M[1, 1],
                     0.5 * (M[0, 1] + M[1, 0]),
                     0.5 * (M[0, 1] - M[1, 0])])


def laplace_pullback_coeffs(amap):
    """(n, 3) symmetric-basis coefficients of the pulled-back Laplacian,
    one row per fan: |det B_i^-1| B_i B_i^T expanded on (A1, A2, A3)."""
    n = amap.B.shape[0]
    out = np.empty((n, 3))
    for i in range(n):
        # the pulled-back tensor is d * B B^T, hence the transpose argument
        out[i] = sym_coeffs(amap.B[i].T, amap.det_inv_abs[i])
    return out


def anisotropic_pullback_coeffs(amap, K):
    """(n, 4) full-basis coefficients of the pulled-back tensor
    |det B_i^-1| B_i K B_i^T, one row per fan."""
    n = amap.B.shape[0]
    out = np.empty((n, 4))
    for i in range(n):
        out[i] = full_coeffs(amap.B[i].T, amap.det_inv_abs[i], K)
    return out


def pullback_tensor(amap, K=None):
    """(n, 2, 2) pulled-back diffusion tensors per fan (reference frame)."""
    n = amap.B.shape[0]
    K = np.eye(2) if K is None else np.asarray(K, dtype=float)
    out = np.empty((n, 2, 2))
    for i in range(n):
        out[i] = amap.det_inv_abs[i] * (amap.B[i] @ K @ amap.B[i].T)
    return out


def _fan_index(p, pts):
    """Fan triangle index for each point of a star-shaped polygon, by angular
    sector around the star center.  Points must lie in the polygon (within
    rounding); the sector choice is what matters, exact containment is the
    caller's concern."""
    v = p.vertices - p.star_center
    q = np.atleast_2d(np.asarray(pts, dtype=float)) - p.star_center
    th_v = np.arctan2(v[:, 1], v[:, 0])
    base = th_v[0]
    sect = np.mod(th_v - base, 2.0 * np.pi)
    sect[0] = 0.0
    order = np.argsort(sect, kind="stable")  # CCW order from vertex 0
    edges = np.concatenate([sect[order], [2.0 * np.pi]])
    phi = np.mod(np.arctan2(q[:, 1], q[:, 0]) - base, 2.0 * np.pi)
    k = np.clip(np.searchsorted(edges, phi, side="right") - 1, 0, p.n - 1)
    fan = order[k]
    # points at the center have an arbitrary angle; pin them to fan 0
    fan[(q * q).sum(1) < (1e-30)] = 0
    return fan


def map_points(amap, pts):
    """Apply the piecewise linear map to points of the normalized polygon.

    Returns (reference points, fan index per point).
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    fan = _fan_index(amap.polygon, pts)
    out = np.einsum("kij,kj->ki", amap.B[fan], pts)
    return out, fan


def unmap_points(amap, ref_pts, fan=None):
    """Inverse of map_points; fan defaults to the reference sector lookup."""
    ref_pts = np.atleast_2d(np.asarray(ref_pts, dtype=float))
    if fan is None:
        fan = _fan_index(amap.reference, ref_pts)
    return np.einsum("kij,kj->ki", amap.Binv[fan], ref_pts), fan


def save_polyset(path, polygons, seed=0):
    """Write a polygon collection: header line then one polygon per line."""
    with open(path, "w") as fh:
        fh.write("POLYSET v1 N=%d count=%d seed=%d\n"
                 % (polygons[0].n if polygons else 0, len(polygons), seed))
        for p in polygons:
            flat = " ".join("%.17g" % x for x in p.vertices.ravel())
            fh.write("%d %s\n" % (p.n, flat))


def load_polyset(path):
    """Read a POLYSET file; returns (polygons, header dict)."""
    try:
        fh = open(path)
    except FileNotFoundError:
        from .errors import MissingFile
        raise MissingFile("no such file: %s" % path)
    with fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("POLYSET v1"):
        raise ParseError("%s:1: expected 'POLYSET v1' header" % path)
    head = {}
    for tok in lines[0].split()[2:]:
        if "=" not in tok:
            raise ParseError("%s:1: malformed header token %r" % (path, tok))
        k, val = tok.split("=", 1)
        head[k] = int(val)
    polys = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            n = int(parts[0])
            coords = np.array([float(t) for t in parts[1:]])
        except ValueError:
            raise ParseError("%s:%d: malformed polygon record" % (path, ln))
        if coords.size != 2 * n:
            raise ParseError("%s:%d: expected %d coordinates, got %d"
                             % (path, ln, 2 * n, coords.size))
        try:
            polys.append(Polygon(coords.reshape(n, 2)))
        except (InvalidArgument, DegenerateGeometry) as exc:
            raise ParseError("%s:%d: %s" % (path, ln, exc))
    if "count" in head and head["count"] != len(polys):
        raise ParseError("%s: header count=%d but found %d polygons"
                         % (path, head["count"], len(polys)))
    return polys, head
