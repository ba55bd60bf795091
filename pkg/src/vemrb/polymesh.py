"""Centroidal Voronoi meshes of the unit square.

Seeds are relaxed with Lloyd iterations; cells are Voronoi regions clipped
exactly to the square by mirroring every seed across the four sides (the
bisector between a seed and its mirror image is the wall itself, and inside
the square a mirror point is never closer than its original, so the clip is
exact, not approximate).
"""

import numpy as np
from scipy.spatial import Voronoi, cKDTree

from .errors import DegenerateGeometry, InvalidArgument, ParseError, MissingFile
from .geometry import Polygon, polygon_area, polygon_centroid, polygon_diameter

SNAP_TOL = 1e-12   # coordinates this close to a wall are snapped onto it
MERGE_TOL = 1e-10  # vertices this close are merged


class PolyMesh:
    """Conforming polygonal mesh.

    Attributes:
        vertices: (nv, 2) float array.
        cells: list of int arrays, each a CCW vertex ring.
        boundary: (nv,) bool, vertices on the domain boundary (topological:
            endpoint of an edge incident to exactly one cell).
        seeds: (nc, 2) generator points, or None when loaded from a file.
    """

    def __init__(self, vertices, cells, seeds=None):
        self.vertices = np.asarray(vertices, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise InvalidArgument("vertices must be (nv, 2)")
        self.cells = [np.asarray(c, dtype=np.int64) for c in cells]
        self.seeds = None if seeds is None else np.asarray(seeds, dtype=float)
        nv = len(self.vertices)
        edge_count = {}
        for ci, ring in enumerate(self.cells):
            if len(ring) < 3:
                raise InvalidArgument("cell %d has fewer than 3 vertices" % ci)
            if len(np.unique(ring)) != len(ring):
                raise InvalidArgument("cell %d repeats a vertex" % ci)
            if ring.min() < 0 or ring.max() >= nv:
                raise InvalidArgument("cell %d references a missing vertex" % ci)
            if polygon_area(self.vertices[ring]) <= 0.0:
                raise InvalidArgument("cell %d is not CCW" % ci)
            for k in range(len(ring)):
                a, b = ring[k], ring[(k + 1) % len(ring)]
                key = (min(a, b), max(a, b))
                edge_count[key] = edge_count.get(key, 0) + 1
        bad = [e for e, c in edge_count.items() if c > 2]
        if bad:
            raise InvalidArgument("non-conforming mesh: edge %s shared by >2 cells" % (bad[0],))
        self.boundary = np.zeros(nv, dtype=bool)
        for (a, b), c in edge_count.items():
            if c == 1:
                self.boundary[a] = True
                self.boundary[b] = True

    @property
    def ncells(self):
        return len(self.cells)

    @property
    def nvertices(self):
        return len(self.vertices)

    @property
    def h(self):
        return max(polygon_diameter(self.vertices[c]) for c in self.cells)

    def cell_polygon(self, i):
        return Polygon(self.vertices[self.cells[i]])

    def cell_sizes(self):
        return np.array([len(c) for c in self.cells])

    def total_area(self):
        return sum(polygon_area(self.vertices[c]) for c in self.cells)


def _mirror_seeds(seeds):
    s = seeds
    return np.vstack([
        s,
        np.column_stack([s[:, 0], -s[:, 1]]),
        np.column_stack([s[:, 0], 2.0 - s[:, 1]]),
        np.column_stack([-s[:, 0], s[:, 1]]),
        np.column_stack([2.0 - s[:, 0], s[:, 1]]),
    ])


def clipped_voronoi_rings(seeds):
    """CCW vertex rings (coordinate arrays) of the square-clipped Voronoi
    cells, one per seed."""
    n = len(seeds)
    vor = Voronoi(_mirror_seeds(seeds))
    rings = []
    for i in range(n):
        reg = vor.regions[vor.point_region[i]]
        if -1 in reg or len(reg) < 3:
            raise DegenerateGeometry("unbounded or empty Voronoi cell %d" % i)
        ring = vor.vertices[reg]
        if polygon_area(ring) < 0.0:
            ring = ring[::-1]
        rings.append(ring)
    return rings


def cvt_energy(seeds, rings):
    """Sum over cells of the second moment about the seed; the Lloyd descent
    objective.  Degree-2 quadrature on the centroid fan is exact here."""
    total = 0.0
    for s, ring in zip(seeds, rings):
        c = polygon_centroid(ring)
        m = len(ring)
        for k in range(m):
            p1, p2 = ring[k], ring[(k + 1) % m]
            area = 0.5 * abs((p1 - c)[0] * (p2 - c)[1] - (p1 - c)[1] * (p2 - c)[0])
            mids = 0.5 * np.array([p1 + p2, p2 + c, c + p1])
            d2 = ((mids - s) ** 2).sum(1)
            total += area / 3.0 * d2.sum()
    return total


def voronoi_mesh(n_cells, rng, lloyd_iters=100, move_tol=1e-8):
    """Lloyd-relaxed Voronoi mesh of [0,1]^2 with n_cells cells."""
    if n_cells < 1:
        raise InvalidArgument("need at least one cell")
    if n_cells == 1:
        verts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        return PolyMesh(verts, [np.arange(4)], seeds=np.array([[0.5, 0.5]]))
    seeds = rng.random((n_cells, 2))
    # a coordinate exactly on a wall would coincide with its mirror image
    seeds = np.clip(seeds, 1e-9, 1.0 - 1e-9)
    rings = None
    for _ in range(max(0, lloyd_iters)):
        rings = clipped_voronoi_rings(seeds)
        cent = np.array([polygon_centroid(r) for r in rings])
        move = np.abs(cent - seeds).max()
        seeds = cent
        if move < move_tol:
            break
    rings = clipped_voronoi_rings(seeds)
    verts, cells = _assemble(rings)
    mesh = PolyMesh(verts, cells, seeds=seeds)
    _check_mesh(mesh)
    return mesh


def _assemble(rings):
    """Snap wall coordinates, merge near-duplicate vertices, canonicalize."""
    pts = np.vstack(rings)
    for wall, val in ((0, 0.0), (0, 1.0), (1, 0.0), (1, 1.0)):
        hit = np.abs(pts[:, wall] - val) <= SNAP_TOL
        pts[hit, wall] = val
    tree = cKDTree(pts)
    parent = np.arange(len(pts))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in sorted(tree.query_pairs(MERGE_TOL)):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    index = {}
    remap = np.empty(len(pts), dtype=np.int64)
    verts = []
    for k in range(len(pts)):
        r = find(k)
        if r not in index:
            index[r] = len(verts)
            verts.append(pts[r])
        remap[k] = index[r]
    cells = []
    off = 0
    for ring in rings:
        ids = remap[off:off + len(ring)]
        off += len(ring)
        keep = [ids[k] for k in range(len(ids)) if ids[k] != ids[(k + 1) % len(ids)]]
        ids = np.array(keep, dtype=np.int64)
        if len(ids) < 3:
            raise DegenerateGeometry("cell collapsed during vertex merging")
        roll = int(np.argmin(ids))
        cells.append(np.roll(ids, -roll))
    return np.array(verts), cells


def _wall_classes(pts):
    """(k, 2) wall ids per axis: -1 off-wall, else 0/1 for walls at 0/1."""
    cls = np.full(pts.shape, -1, dtype=np.int64)
    for axis in (0, 1):
        cls[np.abs(pts[:, axis]) <= SNAP_TOL, axis] = 0
        cls[np.abs(pts[:, axis] - 1.0) <= SNAP_TOL, axis] = 1
    return cls


def collapse_short_edges(mesh, tol=0.1):
    """Merge edges shorter than tol * sqrt(incident cell area).

    Lloyd relaxation leaves near-degenerate Voronoi edges at grain
    boundaries, and the hat of a vertex on such an edge carries a huge
    discrete energy on fan meshes; polygonal mesh generators therefore
    collapse short edges in a post-pass, and this is that pass.  Corners
    never move, wall vertices stay on their wall, interior merges land on
    the group centroid.  The result is conforming but no longer the
    Voronoi diagram of any seed set, so seeds are dropped.
    """
    if tol < 0.0:
        raise InvalidArgument("tol must be nonnegative")
    verts = mesh.vertices.copy()
    cells = [ring.copy() for ring in mesh.cells]
    for _ in range(100):   # every pass removes at least one vertex
        pairs = set()
        for ring in cells:
            v = verts[ring]
            limit = tol * np.sqrt(polygon_area(v))
            e = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)
            for k in np.where(e < limit)[0]:
                a, b = int(ring[k]), int(ring[(k + 1) % len(ring)])
                pairs.add((min(a, b), max(a, b)))
        if not pairs:
            break
        parent = np.arange(len(verts))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for a, b in sorted(pairs):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        groups = {}
        for k in range(len(verts)):
            groups.setdefault(find(k), []).append(k)
        cls = _wall_classes(verts)
        new_pos = {}
        for root, members in groups.items():
            if len(members) == 1:
                continue
            m = np.array(members)
            corners = m[(cls[m] >= 0).all(axis=1)]
            walls = {(ax, cls[k, ax]) for k in m for ax in (0, 1)
                     if cls[k, ax] >= 0}
            if len(corners) > 0:
                if len({(cls[k, 0], cls[k, 1]) for k in corners}) > 1:
                    raise DegenerateGeometry("edge collapse would merge "
                                             "distinct corners")
                new_pos[root] = verts[corners[0]].copy()
            elif walls:
                if len(walls) > 1:
                    raise DegenerateGeometry("edge collapse would merge "
                                             "vertices of different walls")
                axis, val = walls.pop()
                pos = verts[m].mean(axis=0)
                pos[axis] = float(val)
                new_pos[root] = pos
            else:
                new_pos[root] = verts[m].mean(axis=0)
        index = {}
        remap = np.empty(len(verts), dtype=np.int64)
        out = []
        for k in range(len(verts)):
            r = find(k)
            if r not in index:
                index[r] = len(out)
                out.append(new_pos[r] if r in new_pos else verts[r])
            remap[k] = index[r]
        verts = np.array(out)
        next_cells = []
        for ring in cells:
            ids = remap[ring]
            keep = [ids[k] for k in range(len(ids))
                    if ids[k] != ids[(k + 1) % len(ids)]]
            ids = np.array(keep, dtype=np.int64)
            if len(ids) < 3:
                raise DegenerateGeometry("cell collapsed during edge merging")
            next_cells.append(np.roll(ids, -int(np.argmin(ids))))
        cells = next_cells
    else:
        raise DegenerateGeometry("short edges keep reappearing")
    mesh = PolyMesh(verts, cells)
    if abs(mesh.total_area() - 1.0) > 1e-9:
        raise DegenerateGeometry("cell areas do not tile the square")
    return mesh


def _check_mesh(mesh):
    if abs(mesh.total_area() - 1.0) > 1e-9:
        raise DegenerateGeometry("cell areas do not tile the square")
    for i, ring in enumerate(mesh.cells):
        poly = Polygon(mesh.vertices[ring])  # validates star shape
        if mesh.seeds is not None:
            # the generating seed must see its own cell
            v = poly.vertices
            vn = np.roll(v, -1, axis=0)
            s = mesh.seeds[i]
            side = (vn[:, 0] - v[:, 0]) * (s[1] - v[:, 1]) - (vn[:, 1] - v[:, 1]) * (s[0] - v[:, 0])
            if side.min() < -1e-9:
                raise DegenerateGeometry("seed %d escaped its cell" % i)


def save_polymesh(path, mesh):
    with open(path, "w") as fh:
        fh.write("POLYMESH v1\n")
        fh.write("%d %d\n" % (mesh.nvertices, mesh.ncells))
        for x, y in mesh.vertices:
            fh.write("%.17g %.17g\n" % (x, y))
        for ring in mesh.cells:
            fh.write("%d %s\n" % (len(ring), " ".join(str(int(i)) for i in ring)))


def load_polymesh(path):
    try:
        fh = open(path)
    except FileNotFoundError:
        raise MissingFile("no such file: %s" % path)
    with fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "POLYMESH v1":
        raise ParseError("%s:1: expected 'POLYMESH v1' header" % path)
    try:
        nv, nc = (int(t) for t in lines[1].split())
    except (IndexError, ValueError):
        raise ParseError("%s:2: expected '<nv> <nc>'" % path)
    if len(lines) < 2 + nv + nc:
        raise ParseError("%s: truncated (need %d lines)" % (path, 2 + nv + nc))
    verts = np.empty((nv, 2))
    for k in range(nv):
        ln = 3 + k
        parts = lines[2 + k].split()
        try:
            verts[k] = [float(parts[0]), float(parts[1])]
        except (IndexError, ValueError):
            raise ParseError("%s:%d: malformed vertex" % (path, ln))
    cells = []
    for k in range(nc):
        ln = 3 + nv + k
        parts = lines[2 + nv + k].split()
        try:
            m = int(parts[0])
            ring = np.array([int(t) for t in parts[1:]], dtype=np.int64)
        except (IndexError, ValueError):
            raise ParseError("%s:%d: malformed cell" % (path, ln))
        if len(ring) != m:
            raise ParseError("%s:%d: cell announces %d vertices, lists %d"
                             % (path, ln, m, len(ring)))
        cells.append(ring)
    try:
        return PolyMesh(verts, cells)
    except InvalidArgument as exc:
        raise ParseError("%s: %s" % (path, exc))
