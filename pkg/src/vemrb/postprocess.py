"""Conforming reconstruction of VEM solutions and the convergence harness.

A solved dof vector is turned back into a function three ways per cell:
the gradient projection onto linears (discontinuous across cells), the
reduced-basis reconstruction (projection plus database basis functions
weighted by the dof residual, conforming), and a per-cell finite element
resolve with the edge-linear dof trace (the reference reconstruction).
Error norms, line sampling, field export, and the mesh-refinement study
are built on top.
"""

import csv

import numpy as np

import vemrb.femcore as fc
import vemrb.geometry as geo
import vemrb.rbonline as rn
import vemrb.vemsolver as vs
from .errors import InvalidArgument, OutOfDomain, ParseError

MODES = ("pi", "rb", "fe")
CSV_HEADER = ("h", "ndof", "mode", "stab", "err0", "err1", "errE", "errInf",
              "rate0", "rate1", "rateE", "rateInf")


def parse_mode(tag):
    """"pi", "fe", "rb" or "rb:M" -> (kind, M)."""
    name, _, m = tag.partition(":")
    if name not in MODES:
        raise InvalidArgument("unknown reconstruction mode %r" % (tag,))
    if m:
        try:
            m = int(m)
        except ValueError:
            raise InvalidArgument("bad mode tag %r" % (tag,))
        if name != "rb" or m < 0:
            raise InvalidArgument("bad mode tag %r" % (tag,))
        return name, m
    return name, 1 if name == "rb" else 0


def parse_stab(tag):
    """"dofi", "drecipe", "rb" or "rb:M" -> (stab, M)."""
    name, _, m = tag.partition(":")
    if name not in vs.STABS or (m and name != "rb"):
        raise InvalidArgument("unknown stabilization %r" % (tag,))
    return name, int(m) if m else 1


class CellField:
    """One cell's reconstruction: an evaluation triangulation in physical
    coordinates, nodal values on it, and the mode tag."""

    __slots__ = ("mesh", "values", "tag")

    def __init__(self, mesh, values, tag):
        self.mesh = mesh
        self.values = values
        self.tag = tag

    def corner_values(self):
        """Values at the polygon vertices, in ring order."""
        b = self.mesh
        idx = np.full(b.polygon.n, -1)
        at = (b.bedge >= 0) & (b.bfrac == 0.0)
        idx[b.bedge[at]] = np.where(at)[0]
        return self.values[idx]

    def at(self, points):
        return fc.interpolate(self.mesh, self.values, points)


def _poly_eval(c3, pts):
    return c3[0] + c3[1] * pts[:, 0] + c3[2] * pts[:, 1]


def _as_polygon(cell):
    return cell if isinstance(cell, geo.Polygon) else geo.Polygon(cell)


def reconstruct_cell(cell, dofs, mode, db=None, M=None, delta=None,
                     level=None):
    """Reconstruction of the cell-local solution with the given mode tag.

    pi evaluates the gradient projection on a level-2 fan refinement;
    rb adds the database basis functions weighted by the dof residual,
    on the pulled-back reference lattice (level fixed by the database);
    fe re-solves the Laplace problem with the edge-linear dof trace on a
    fan mesh of the given delta or level (default level 4).  Triangles
    carry no non-polynomial part, so rb falls back to the projection.
    """
    cell = _as_polygon(cell)
    kind, m = parse_mode(mode)
    if M is not None:
        m = M
    dofs = np.asarray(dofs, dtype=float)
    if dofs.shape != (cell.n,):
        raise InvalidArgument("expected %d dofs" % cell.n)
    coef, pdof = vs.local_projector(cell)
    c3 = coef @ dofs
    if kind == "rb" and cell.n == 3:
        kind = "pi"
    if kind == "pi":
        tm = fc.triangulate(cell, level=2 if level is None else level)
        return CellField(tm, _poly_eval(c3, tm.nodes), mode)
    if kind == "rb":
        dbn = vs._db_for(db, cell.n)
        pn, _, _ = geo.normalize(cell)
        ev = rn.reduced_solve(pn, dbn, m)
        tm = fc.triangulate(cell, level=dbn.level)
        resid = dofs - pdof @ dofs
        corr = rn.combine_reference(ev, resid)
        if len(corr.values) != tm.nnodes:
            raise InvalidArgument("database level does not match lattice")
        return CellField(tm, _poly_eval(c3, tm.nodes) + corr.values, mode)
    if delta is None and level is None:
        level = 4
    tm = fc.triangulate(cell, delta=delta, level=level)
    vals = fc.solve_dirichlet(tm, None, fc.boundary_values_from_dofs(tm, dofs))
    return CellField(tm, vals, mode)


def reconstruct(mesh, u, mode, db=None, M=None, delta=None, level=None):
    """Per-cell reconstructions plus the conformity jump statistic."""
    u = np.asarray(u, dtype=float)
    fields = []
    for ci in range(mesh.ncells):
        try:
            fields.append(reconstruct_cell(
                mesh.cell_polygon(ci), u[mesh.cells[ci]], mode,
                db=db, M=M, delta=delta, level=level))
        except Exception as exc:
            raise type(exc)("cell %d: %s" % (ci, exc)) from exc
    return fields, conformity_jump(mesh, fields)


def conformity_jump(mesh, fields):
    """Max spread of reconstructed values over cells sharing a vertex."""
    lo = np.full(mesh.nvertices, np.inf)
    hi = np.full(mesh.nvertices, -np.inf)
    for ring, cf in zip(mesh.cells, fields):
        cv = cf.corner_values()
        np.minimum.at(lo, ring, cv)
        np.maximum.at(hi, ring, cv)
    seen = hi >= lo
    return float((hi[seen] - lo[seen]).max()) if seen.any() else 0.0


def _wrap_exact(prob):
    def ex(x, y):
        x = np.asarray(x, dtype=float)
        pts = np.stack([x.ravel(), np.asarray(y, dtype=float).ravel()], axis=1)
        return prob.exact(pts).reshape(x.shape)

    def exg(x, y):
        x = np.asarray(x, dtype=float)
        pts = np.stack([x.ravel(), np.asarray(y, dtype=float).ravel()], axis=1)
        g = prob.exact_grad(pts)
        return g[:, 0].reshape(x.shape), g[:, 1].reshape(x.shape)

    return ex, exg


def _rel(num, den):
    """Relative error from a (num, den) pair; 0/0 counts as no error."""
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return float(num / den)


def error_norms(mesh, u, prob, mode, db=None, M=None, delta=None, level=None):
    """Relative error norms of the reconstruction against prob.exact.

    Returns a dict with err0 (L2), err1 (full H1), errE (sym(K)-weighted
    energy), errInf (over evaluation nodes), plus h and ndof.  Each cell
    integrates on its own evaluation triangulation with the degree-2 rule.
    """
    if prob.exact is None or prob.exact_grad is None:
        raise InvalidArgument("error norms need exact and exact_grad")
    ex, exg = _wrap_exact(prob)
    num = np.zeros(3)
    den = np.zeros(3)
    ninf = dinf = 0.0
    for ci in range(mesh.ncells):
        cf = reconstruct_cell(mesh.cell_polygon(ci), u[mesh.cells[ci]], mode,
                              db=db, M=M, delta=delta, level=level)
        r = fc.error_norms_vs(cf.mesh, cf.values, ex, exg, K=prob.K)
        num += np.array([r["err_l2"], r["err_h1"], r["err_en"]]) ** 2
        den += np.array([r["ref_l2"], r["ref_h1"], r["ref_en"]]) ** 2
        ninf = max(ninf, r["err_inf"])
        dinf = max(dinf, r["ref_inf"])
    return {
        "err0": float(np.sqrt(_rel(num[0], den[0]))),
        "err1": float(np.sqrt(_rel(num[0] + num[1], den[0] + den[1]))),
        "errE": float(np.sqrt(_rel(num[2], den[2]))),
        "errInf": _rel(ninf, dinf),
        "h": mesh.h,
        "ndof": mesh.nvertices,
    }


def _locate(mesh, pts, tol=1e-12):
    """Cells containing each point: (lowest index, highest index) arrays."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    lo = np.full(len(pts), -1)
    hi = np.full(len(pts), -1)
    for ci, ring in enumerate(mesh.cells):
        v = mesh.vertices[ring]
        box_ok = ((pts[:, 0] >= v[:, 0].min() - tol)
                  & (pts[:, 0] <= v[:, 0].max() + tol)
                  & (pts[:, 1] >= v[:, 1].min() - tol)
                  & (pts[:, 1] <= v[:, 1].max() + tol))
        if not box_ok.any():
            continue
        q = pts[box_ok]
        d = np.roll(v, -1, axis=0) - v
        scale = np.sqrt((d * d).sum(1)).max()
        cross = (d[None, :, 0] * (q[:, None, 1] - v[None, :, 1])
                 - d[None, :, 1] * (q[:, None, 0] - v[None, :, 0]))
        inside = (cross >= -tol * max(scale, 1.0)).all(axis=1)
        sel = np.where(box_ok)[0][inside]
        lo[sel[lo[sel] < 0]] = ci
        hi[sel] = ci
    return lo, hi


def line_sample(mesh, u, p0, p1, count, mode, db=None, M=None, delta=None,
                level=None):
    """Reconstruction along the segment p0 -> p1 at count uniform points.

    Returns (count, 5) records [t, x, y, value, value_alt]: value comes
    from the lowest-index containing cell.  In pi mode value_alt is the
    one-sided value from the highest-index cell (the two differ exactly
    at cell interfaces); conforming modes copy value.  fe defaults to the
    paper-scale per-cell mesh size diam/100 when no size is given.
    """
    kind, _ = parse_mode(mode)
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    t = np.linspace(0.0, 1.0, count)
    pts = p0[None] + t[:, None] * (p1 - p0)[None]
    lo, hi = _locate(mesh, pts)
    if (lo < 0).any():
        k = int(np.where(lo < 0)[0][0])
        raise OutOfDomain("sample point %d at (%.6g, %.6g) lies outside the "
                          "mesh" % (k, pts[k, 0], pts[k, 1]))
    out = np.empty((count, 5))
    out[:, 0] = t
    out[:, 1:3] = pts
    fine = delta is None and level is None and kind == "fe"
    for side, owner in ((3, lo), (4, hi)):
        if side == 4 and kind != "pi":
            out[:, 4] = out[:, 3]
            break
        for ci in np.unique(owner):
            cell = mesh.cell_polygon(ci)
            sel = owner == ci
            d = cell.diameter / 100.0 if fine else delta
            cf = reconstruct_cell(cell, u[mesh.cells[ci]], mode, db=db, M=M,
                                  delta=d, level=level)
            out[sel, side] = cf.at(pts[sel])
    return out


def save_field(path, mesh, fields, jump, mode):
    """VEMFIELD v1: per-cell evaluation points, values, and triangles."""
    with open(path, "w") as fh:
        fh.write("VEMFIELD v1\nmode %s\njump %.17g\ncells %d\n"
                 % (mode, jump, mesh.ncells))
        for ci, cf in enumerate(fields):
            m = cf.mesh
            fh.write("cell %d %d %d\n" % (ci, m.nnodes, len(m.tris)))
            for (x, y), v in zip(m.nodes, cf.values):
                fh.write("%.17g %.17g %.17g\n" % (x, y, v))
            for a, b, c in m.tris:
                fh.write("%d %d %d\n" % (a, b, c))


def load_field(path):
    """Parse a VEMFIELD v1 file into {mode, jump, cells: [(pts, vals, tris)]}."""
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != "VEMFIELD v1":
        raise ParseError("%s: line 1: expected 'VEMFIELD v1'" % path)
    try:
        mode = lines[1].split()[1]
        jump = float(lines[2].split()[1])
        ncells = int(lines[3].split()[1])
        cells = []
        k = 4
        for _ in range(ncells):
            _, ci, npts, ntris = lines[k].split()
            npts, ntris = int(npts), int(ntris)
            rows = [lines[k + 1 + i].split() for i in range(npts)]
            pv = np.array(rows, dtype=float)
            k += 1 + npts
            tris = np.array([lines[k + i].split() for i in range(ntris)],
                            dtype=int)
            k += ntris
            cells.append((pv[:, :2], pv[:, 2], tris))
    except (IndexError, ValueError) as exc:
        raise ParseError("%s: malformed field file near line %d: %s"
                         % (path, k + 1, exc))
    return {"mode": mode, "jump": jump, "cells": cells}


def smooth_dofs(p):
    """Vertex interpolation of x^5 + y^5, the smooth accuracy case."""
    v = p.vertices
    return v[:, 0] ** 5 + v[:, 1] ** 5


def validation_errors(db, p, dofs, ms):
    """Relative H1 gap between the rb and lattice-FE reconstructions.

    p must be normalized.  The FE reconstruction solves the Laplace
    problem with the edge-linear dof trace on the polygon's fan lattice
    at the database level, the same nodes the reduced combination lives
    on, so the gap isolates the basis truncation.  Returns one error per
    entry of ms; m = 0 measures the bare polynomial projection, the
    baseline the statistics start from.
    """
    dofs = np.asarray(dofs, dtype=float)
    tm = fc.triangulate(p, level=db.level)
    ufe = fc.solve_dirichlet(tm, None, fc.boundary_values_from_dofs(tm, dofs))
    l2, h1, _, _ = fc.h1_norm(tm, ufe)
    ref = np.hypot(l2, h1)
    coef, pdof = vs.local_projector(p)
    poly = _poly_eval(coef @ dofs, tm.nodes)
    resid = dofs - pdof @ dofs
    out = []
    for m in ms:
        urb = poly.copy()
        if m > 0:
            ev = rn.reduced_solve(p, db, m)
            urb += rn.combine_reference(ev, resid).values
        l2, h1, _, _ = fc.h1_norm(tm, ufe - urb)
        out.append(float(np.hypot(l2, h1) / ref))
    return out


def validation_study(db, ntests, ms, rng, case="random"):
    """Validation errors on freshly generated polygons: (ntests, len(ms)).

    case "smooth" interpolates x^5 + y^5 at the vertices, "random" draws
    standard normal dof values.
    """
    if case not in ("smooth", "random"):
        raise InvalidArgument("unknown validation case %r" % (case,))
    errs = np.empty((ntests, len(ms)))
    for t in range(ntests):
        p = geo.generate_convex_polygon(db.n, rng)
        pn, _, _ = geo.normalize(p)
        dofs = smooth_dofs(pn) if case == "smooth" \
            else rng.standard_normal(db.n)
        errs[t] = validation_errors(db, pn, dofs, ms)
    return errs


SUMMARY_ROWS = ("min", "p05", "mean", "p95", "max")


def validation_summary(errs):
    """min/p05/mean/p95/max of each column of a validation error table."""
    errs = np.asarray(errs, dtype=float)
    return {
        "min": errs.min(axis=0),
        "p05": np.percentile(errs, 5.0, axis=0),
        "mean": errs.mean(axis=0),
        "p95": np.percentile(errs, 95.0, axis=0),
        "max": errs.max(axis=0),
    }


def rate_of(err, err_prev, h, h_prev):
    """log(err/err_prev) / log(h/h_prev), the mesh-refinement rate."""
    return float(np.log(err / err_prev) / np.log(h / h_prev))


def convergence_study(meshes, prob, stabs, modes, db=None, delta=None,
                      level=None, rb_fallback="error"):
    """Solve on each mesh per stabilization, measure each reconstruction.

    Returns CSV-ready row dicts; rates compare consecutive meshes within
    the same (stab, mode) series and are None on the first mesh.
    """
    rows = []
    prev = {}
    for mesh in meshes:
        sols = {}
        for stag in stabs:
            sname, sm = parse_stab(stag)
            sols[stag] = vs.assemble_and_solve(
                mesh, prob, stab=sname, db=db, M=sm, rb_fallback=rb_fallback)
        for stag in stabs:
            for mtag in modes:
                e = error_norms(mesh, sols[stag], prob, mtag, db=db,
                                delta=delta, level=level)
                row = {"h": mesh.h, "ndof": mesh.nvertices, "mode": mtag,
                       "stab": stag, "err0": e["err0"], "err1": e["err1"],
                       "errE": e["errE"], "errInf": e["errInf"]}
                last = prev.get((stag, mtag))
                for name in ("0", "1", "E", "Inf"):
                    if last is None:
                        row["rate" + name] = None
                    else:
                        row["rate" + name] = rate_of(
                            row["err" + name], last["err" + name],
                            mesh.h, last["h"])
                prev[(stag, mtag)] = row
                rows.append(row)
    return rows


def write_convergence_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in rows:
            out = []
            for key in CSV_HEADER:
                val = row[key]
                if val is None:
                    out.append("")
                elif isinstance(val, float):
                    out.append("%.12g" % val)
                else:
                    out.append(str(val))
            w.writerow(out)
