"""Command line front end: one binary exposing the whole pipeline."""

import argparse
import csv
import os
import sys
import time

import numpy as np

import vemrb
import vemrb.femcore as fc
import vemrb.geometry as geo
import vemrb.polymesh as pm
import vemrb.postprocess as pp
import vemrb.rbonline as rn
import vemrb.vemsolver as vs
from .errors import DatabaseError, InvalidArgument, VemrbError
from .rboffline import open_database, save_database_root, train_database

BENCH_HEADER = ("n", "method", "T_build", "T_apply", "T_assemble", "T_solve")
COND_HEADER = ("h", "ndof", "stab", "kappa")
LINE_HEADER = ("t", "x", "y", "value", "value_alt")
STATS_HEADER = ("case", "m", "polygon", "err")


# ---------------------------------------------------------------- plumbing

class _Parser(argparse.ArgumentParser):
    """Parser whose own errors surface as InvalidArgument (exit code 2)."""

    def error(self, message):
        raise InvalidArgument(message)


def _int_list(text):
    try:
        vals = [int(tok) for tok in text.split(",") if tok]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma separated integers, "
                                         "got %r" % text)
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return vals


def _float_list(text):
    try:
        vals = [float(tok) for tok in text.split(",") if tok]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma separated numbers, "
                                         "got %r" % text)
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one number")
    return vals


def _str_list(text):
    vals = [tok.strip() for tok in text.split(",") if tok.strip()]
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one entry")
    return vals


def _fmt(val):
    if val is None:
        return "none"
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return "%.17g" % val
    if isinstance(val, (list, tuple)):
        return ",".join(_fmt(v) for v in val)
    return str(val)


def echo_config(args, notes=()):
    """Record the fully resolved configuration next to the primary output."""
    out = args.out
    base = out if os.path.isdir(out) else os.path.dirname(os.path.abspath(out))
    lines = ["vemrb %s" % vemrb.__version__, "command %s" % args.command]
    for key in sorted(vars(args)):
        if key in ("func", "command"):
            continue
        lines.append("%s %s" % (key, _fmt(getattr(args, key))))
    lines.extend(notes)
    with open(os.path.join(base, "config.echo.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _db_root(root, ns, strict=True):
    """Open the per-N databases under root for every vertex count present."""
    if root is None:
        raise DatabaseError("reduced-basis stabilization or reconstruction "
                            "needs a database (--db)")
    if not os.path.isdir(root):
        raise DatabaseError("no database root at %s" % root)
    out = {}
    for n in sorted(ns):
        if n == 3:
            continue
        try:
            out[n] = open_database(root, n)
        except DatabaseError:
            if strict:
                raise
    return out


def _mesh_ns(meshes):
    ns = set()
    for mesh in meshes:
        ns |= {len(c) for c in mesh.cells}
    return ns


def _problem(args):
    """Build the requested problem preset from the resolved flags."""
    name = args.problem
    if name == "poisson":
        return vs.poisson()
    if name == "test1":
        return vs.test1() if args.nu is None else vs.test1(nu=args.nu)
    if name == "test2":
        kw = {}
        if args.nu1 is not None:
            kw["nu1"] = args.nu1
        if args.nu2 is not None:
            kw["nu2"] = args.nu2
        return vs.test2(**kw)
    # custom: zero load with linear boundary data, so the discrete solution
    # must reproduce the linear exactly and the errors sit at roundoff
    if len(args.k) != 4:
        raise InvalidArgument("--k needs 4 entries (row-major 2x2 tensor)")
    if len(args.g) != 3:
        raise InvalidArgument("--g needs 3 entries (a, b, c for a+bx+cy)")
    a, b, c = args.g

    def lin(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return a + b * pts[:, 0] + c * pts[:, 1]

    def grad(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.tile([b, c], (len(pts), 1))

    def zero(pts):
        return np.zeros(len(np.atleast_2d(pts)))

    K = np.array(args.k, dtype=float).reshape(2, 2)
    return vs.DiffusionProblem(K, zero, lin, exact=lin, exact_grad=grad,
                               name="custom")


# ---------------------------------------------------------------- commands

def cmd_mesh(args):
    rng = np.random.default_rng(args.seed)
    mesh = pm.voronoi_mesh(args.cells, rng, lloyd_iters=args.lloyd)
    pm.save_polymesh(args.out, mesh)
    echo_config(args)
    print("wrote %s: %d cells, %d vertices, h=%.4g"
          % (args.out, mesh.ncells, mesh.nvertices, mesh.h))
    return 0


def cmd_gen_dataset(args):
    rng = np.random.default_rng(args.seed)
    polys = [geo.normalize(geo.generate_convex_polygon(args.n, rng))[0]
             for _ in range(args.count)]
    geo.save_polyset(args.out, polys, seed=args.seed)
    echo_config(args)
    print("wrote %s: %d polygons with N=%d" % (args.out, len(polys), args.n))
    return 0


def _training_polygons(args, n, rng):
    if args.set is None:
        return [geo.generate_convex_polygon(n, rng)
                for _ in range(args.train)]
    polys, _ = geo.load_polyset(args.set)
    bad = [p.n for p in polys if p.n != n]
    if bad:
        raise InvalidArgument("dataset %s holds N=%d polygons, need N=%d"
                              % (args.set, bad[0], n))
    if len(polys) < args.train:
        raise InvalidArgument("dataset %s holds %d polygons, need %d"
                              % (args.set, len(polys), args.train))
    idx = rng.choice(len(polys), size=args.train, replace=False)
    return [polys[i] for i in idx]


def cmd_offline(args):
    rng = np.random.default_rng(args.seed)
    if args.delta is None and args.level is None:
        args.delta = 0.02
    if args.set is not None and len(args.n) != 1:
        raise InvalidArgument("--set fixes one vertex count per file")
    dbs = []
    for n in args.n:
        polys = [geo.normalize(p)[0] for p in _training_polygons(args, n, rng)]
        dbs.append(train_database(n, polys, args.mmax, level=args.level,
                                  delta=args.delta, seed=args.seed))
    save_database_root(dbs, args.out)
    echo_config(args)
    for db in dbs:
        print("trained N=%d: P=%d, M_max=%d, level=%d, skipped=%d"
              % (db.n, db.trained_P, db.mmax, db.level, db.skipped))
    return 0


def cmd_validate(args):
    rng = np.random.default_rng(args.seed)
    db = open_database(args.db, args.n)
    ms = args.m
    if min(ms) < 0:
        raise InvalidArgument("basis sizes must be nonnegative")
    if max(ms) > db.mmax:
        raise DatabaseError("requested M=%d exceeds database M_max=%d"
                            % (max(ms), db.mmax))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_HEADER)
        for case in ("smooth", "random"):
            errs = pp.validation_study(db, args.tests, ms, rng, case=case)
            for j, m in enumerate(ms):
                for i in range(args.tests):
                    w.writerow([case, m, i, "%.12g" % errs[i, j]])
            summary = pp.validation_summary(errs)
            for stat in pp.SUMMARY_ROWS:
                for j, m in enumerate(ms):
                    w.writerow([case, m, stat, "%.12g" % summary[stat][j]])
    echo_config(args)
    print("wrote %s: %d polygons x %d basis sizes x 2 cases"
          % (args.out, args.tests, len(ms)))
    return 0


def cmd_solve(args):
    mesh = pm.load_polymesh(args.mesh)
    prob = _problem(args)
    db = None
    if args.stab == "rb":
        db = _db_root(args.db, _mesh_ns([mesh]),
                      strict=args.rb_fallback == "error")
    u = vs.assemble_and_solve(mesh, prob, stab=args.stab, db=db, M=args.m,
                              rb_fallback=args.rb_fallback)
    vs.save_solution(args.out, u)
    echo_config(args)
    print("wrote %s: %d dofs, max |u| = %.6g"
          % (args.out, len(u), np.abs(u).max()))
    return 0


def cmd_convergence(args):
    rng = np.random.default_rng(args.seed)
    prob = _problem(args)
    meshes = [pm.voronoi_mesh(c, rng) for c in args.cells]
    needs_db = any(pp.parse_stab(t)[0] == "rb" for t in args.stabs) \
        or any(pp.parse_mode(t)[0] == "rb" for t in args.modes)
    db = None
    if needs_db:
        db = _db_root(args.db, _mesh_ns(meshes),
                      strict=args.rb_fallback == "error")
    os.makedirs(args.out, exist_ok=True)
    rows = pp.convergence_study(meshes, prob, args.stabs, args.modes, db=db,
                                delta=args.delta, level=args.level,
                                rb_fallback=args.rb_fallback)
    path = os.path.join(args.out, "convergence.csv")
    pp.write_convergence_csv(path, rows)
    if args.cond:
        with open(os.path.join(args.out, "condition.csv"), "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COND_HEADER)
            for mesh in meshes:
                for stag in args.stabs:
                    sname, sm = pp.parse_stab(stag)
                    sysm = vs.assemble(mesh, prob, stab=sname, db=db, M=sm,
                                       rb_fallback=args.rb_fallback)
                    kappa = vs.condition_estimate(sysm.interior_matrix())
                    w.writerow(["%.12g" % mesh.h, mesh.nvertices, stag,
                                "%.12g" % kappa])
    echo_config(args, notes=("errInf_convention maximum over the per-cell "
                             "evaluation nodes",))
    print("wrote %s: %d rows" % (path, len(rows)))
    return 0


def cmd_reconstruct(args):
    mesh = pm.load_polymesh(args.mesh)
    u = vs.load_solution(args.sol)
    if len(u) != mesh.nvertices:
        raise InvalidArgument("solution has %d dofs for a %d-vertex mesh"
                              % (len(u), mesh.nvertices))
    kind, _ = pp.parse_mode(args.mode)
    db = _db_root(args.db, _mesh_ns([mesh])) if kind == "rb" else None
    fields, jump = pp.reconstruct(mesh, u, args.mode, db=db,
                                  delta=args.delta, level=args.level)
    pp.save_field(args.out, mesh, fields, jump, args.mode)
    msg = "wrote %s: %d cells, conformity jump %.3e" \
        % (args.out, mesh.ncells, jump)
    if args.line is not None:
        if len(args.line) != 4:
            raise InvalidArgument("--line needs 4 entries (x0,y0,x1,y1)")
        x0, y0, x1, y1 = args.line
        arr = pp.line_sample(mesh, u, (x0, y0), (x1, y1), args.samples,
                             args.mode, db=db, delta=args.delta,
                             level=args.level)
        lpath = args.line_out
        if lpath is None:
            lpath = os.path.splitext(args.out)[0] + ".line.csv"
        with open(lpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LINE_HEADER)
            for row in arr:
                w.writerow(["%.12g" % v for v in row])
        msg += "; %s: %d samples" % (lpath, len(arr))
    echo_config(args)
    print(msg)
    return 0


def cmd_bench(args):
    rng = np.random.default_rng(args.seed)
    rows = []
    ratios = []
    for n in args.n:
        db = open_database(args.db, n)
        if max(args.m) > db.mmax:
            raise DatabaseError("requested M=%d exceeds database M_max=%d"
                                % (max(args.m), db.mmax))
        sums = {}

        def add(method, k, dt):
            sums.setdefault(method, np.zeros(4))[k] += dt

        for _ in range(args.tests):
            p = geo.normalize(geo.generate_convex_polygon(n, rng))[0]
            # evaluation lattice shared by the projection apply timings
            tm = fc.triangulate(p, delta=args.delta)
            for dofs in (pp.smooth_dofs(p), rng.standard_normal(n)):
                t0 = time.perf_counter()
                coef, _ = vs.local_projector(p)
                t1 = time.perf_counter()
                c3 = coef @ dofs
                # the apply cost is the evaluation itself; values are unused
                _ = c3[0] + c3[1] * tm.nodes[:, 0] + c3[2] * tm.nodes[:, 1]
                t2 = time.perf_counter()
                add("pi", 0, t1 - t0)
                add("pi", 1, t2 - t1)

                t0 = time.perf_counter()
                tmb = fc.triangulate(p, delta=args.delta)
                A = fc.assemble_stiffness(tmb, None)
                t1 = time.perf_counter()
                solver = fc.DirichletSolver(tmb, matrix=A)
                solver.solve(fc.boundary_values_from_dofs(tmb, dofs))
                t2 = time.perf_counter()
                add("fe", 2, t1 - t0)
                add("fe", 3, t2 - t1)

                for m in args.m:
                    t0 = time.perf_counter()
                    amap = geo.build_affine_map(p)
                    A, rhs = rn.reduced_system(amap, db, m)
                    t1 = time.perf_counter()
                    rn.solve_reduced_systems(A, rhs)
                    t2 = time.perf_counter()
                    add("rb:%d" % m, 2, t1 - t0)
                    add("rb:%d" % m, 3, t2 - t1)
        count = 2 * args.tests
        for method in ["pi", "fe"] + ["rb:%d" % m for m in args.m]:
            mean = sums[method] / count
            filled = (0, 1) if method == "pi" else (2, 3)
            rows.append([n, method] + ["%.6g" % mean[i] if i in filled
                                       else "" for i in range(4)])
        worst = sums["rb:%d" % max(args.m)]
        ratios.append((n, sums["fe"][2:].sum() / worst[2:].sum()))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_HEADER)
        w.writerows(rows)
    echo_config(args)
    for n, ratio in ratios:
        print("N=%d: fe / rb:%d online time ratio %.1fx"
              % (n, max(args.m), ratio))
    print("wrote %s: %d rows" % (args.out, len(rows)))
    return 0


def cmd_demo_jump(args):
    rng = np.random.default_rng(args.seed)
    mesh = pm.voronoi_mesh(args.cells, rng)

    def zero(pts):
        return np.zeros(len(np.atleast_2d(pts)))

    def g(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.where(pts[:, 0] <= 0.5, 1.0, 0.0)

    prob = vs.DiffusionProblem(np.eye(2), zero, g, name="jump")
    db = _db_root(args.db, _mesh_ns([mesh]))
    u = vs.assemble_and_solve(mesh, prob, stab=args.stab, db=db, M=args.m,
                              rb_fallback=args.rb_fallback)
    os.makedirs(args.out, exist_ok=True)
    pm.save_polymesh(os.path.join(args.out, "mesh.txt"), mesh)
    vs.save_solution(os.path.join(args.out, "sol.txt"), u)
    for mode, fname in (("pi", "pi.vemfield"), ("rb:%d" % args.m,
                                                "rb.vemfield")):
        fields, jump = pp.reconstruct(mesh, u, mode, db=db)
        pp.save_field(os.path.join(args.out, fname), mesh, fields, jump, mode)
        print("%s: conformity jump %.3e" % (mode, jump))
    echo_config(args)
    print("wrote %s: mesh.txt, sol.txt, pi.vemfield, rb.vemfield" % args.out)
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    top = _Parser(prog="vemrb", description=__doc__)
    top.add_argument("--version", action="version",
                     version="vemrb %s" % vemrb.__version__)
    sub = top.add_subparsers(dest="command", required=True, metavar="command")

    def cmd(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0,
                       help="master seed; every random draw flows from it")
        p.add_argument("--threads", type=int, default=1,
                       help="accepted for interface stability; all "
                            "reductions are deterministic, so results do "
                            "not depend on it")
        return p

    def rb_fallback(p):
        p.add_argument("--rb-fallback", choices=("error", "dofi"),
                       default="error",
                       help="what to do for cells whose vertex count has "
                            "no database")

    def problem_flags(p):
        p.add_argument("--problem",
                       choices=("poisson", "test1", "test2", "custom"),
                       default="poisson")
        p.add_argument("--nu", type=float, default=None,
                       help="oscillation frequency override (test1)")
        p.add_argument("--nu1", type=float, default=None,
                       help="left-piece frequency override (test2)")
        p.add_argument("--nu2", type=float, default=None,
                       help="x-direction frequency override (test2)")
        p.add_argument("--k", type=_float_list, default=[1.0, 0.0, 0.0, 1.0],
                       help="row-major 2x2 diffusion tensor (custom)")
        p.add_argument("--g", type=_float_list, default=[0.0, 1.0, 1.0],
                       help="linear boundary data a,b,c for a+bx+cy (custom)")

    p = cmd("mesh", cmd_mesh, "generate a Lloyd-relaxed Voronoi mesh of "
            "the unit square")
    p.add_argument("--cells", type=int, default=100)
    p.add_argument("--lloyd", type=int, default=100,
                   help="maximum Lloyd relaxation sweeps")
    p.add_argument("--out", required=True)

    p = cmd("gen-dataset", cmd_gen_dataset, "generate a dataset of "
            "normalized convex polygons")
    p.add_argument("--n", type=int, default=6, help="vertex count")
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--out", required=True)

    p = cmd("offline", cmd_offline, "train the per-N reduced-basis "
            "databases")
    p.add_argument("--n", type=_int_list, default=[6],
                   help="vertex counts, comma separated")
    p.add_argument("--train", type=int, default=100,
                   help="training polygons per vertex count")
    p.add_argument("--mmax", type=int, default=20)
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--delta", type=float, default=None,
                     help="snapshot mesh size (default 0.02)")
    grp.add_argument("--level", type=int, default=None,
                     help="snapshot refinement level (overrides --delta)")
    p.add_argument("--set", default=None,
                   help="draw training polygons from this dataset file")
    p.add_argument("--out", required=True, help="database root directory")

    p = cmd("validate", cmd_validate, "reduced-basis reconstruction errors "
            "on fresh test polygons")
    p.add_argument("--db", required=True)
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--tests", type=int, default=500)
    p.add_argument("--m", type=_int_list, default=[0, 1, 2, 5, 10, 20],
                   help="basis sizes, comma separated (0 = bare projection)")
    p.add_argument("--out", required=True)

    p = cmd("solve", cmd_solve, "solve a problem preset on a mesh file")
    p.add_argument("--mesh", required=True)
    problem_flags(p)
    p.add_argument("--stab", choices=("dofi", "drecipe", "rb"),
                   default="dofi")
    p.add_argument("--db", default=None)
    p.add_argument("--m", type=int, default=1,
                   help="basis size for the rb stabilization")
    rb_fallback(p)
    p.add_argument("--out", required=True)

    p = cmd("convergence", cmd_convergence, "mesh-refinement study with "
            "reconstruction error norms")
    problem_flags(p)
    p.add_argument("--cells", type=_int_list, default=[25, 100, 400, 1600])
    p.add_argument("--stabs", type=_str_list, default=["dofi"],
                   help="stabilization tags, e.g. dofi,drecipe,rb:1")
    p.add_argument("--modes", type=_str_list, default=["pi"],
                   help="reconstruction tags, e.g. pi,rb:1,fe")
    p.add_argument("--db", default=None)
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--delta", type=float, default=None,
                     help="fe reconstruction mesh size")
    grp.add_argument("--level", type=int, default=None,
                     help="fe reconstruction refinement level")
    p.add_argument("--cond", action="store_true",
                   help="also estimate interior-matrix condition numbers")
    rb_fallback(p)
    p.add_argument("--out", required=True, help="output directory")

    p = cmd("reconstruct", cmd_reconstruct, "reconstruct a saved solution "
            "as a per-cell field, optionally sampled along a line")
    p.add_argument("--mesh", required=True)
    p.add_argument("--sol", required=True)
    p.add_argument("--mode", default="rb:1", help="pi, rb:M, or fe")
    p.add_argument("--db", default=None)
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--delta", type=float, default=None)
    grp.add_argument("--level", type=int, default=None)
    p.add_argument("--line", type=_float_list, default=None,
                   help="sample segment x0,y0,x1,y1")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--line-out", default=None,
                   help="line CSV path (default: next to --out)")
    p.add_argument("--out", required=True, help="field file path")

    p = cmd("bench", cmd_bench, "mean per-polygon reconstruction timings")
    p.add_argument("--db", required=True)
    p.add_argument("--n", type=_int_list, default=[6])
    p.add_argument("--tests", type=int, default=100)
    p.add_argument("--m", type=_int_list, default=[1, 5, 30, 60])
    p.add_argument("--delta", type=float, default=0.01,
                   help="fe reconstruction mesh size")
    p.add_argument("--out", required=True)

    p = cmd("demo-jump", cmd_demo_jump, "solve with a discontinuous "
            "boundary datum and export pi vs rb reconstruction fields")
    p.add_argument("--cells", type=int, default=100)
    p.add_argument("--db", required=True)
    p.add_argument("--m", type=int, default=1,
                   help="basis size for the rb reconstruction")
    p.add_argument("--stab", choices=("dofi", "drecipe", "rb"),
                   default="dofi")
    rb_fallback(p)
    p.add_argument("--out", required=True, help="output directory")

    return top


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except VemrbError as exc:
        print("vemrb: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return exc.exit_code


def main():
    sys.exit(run(sys.argv[1:]))
