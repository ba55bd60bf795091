#!/usr/bin/env python3
"""Turn the pipeline's CSV and VEMFIELD outputs into figures.

Pure consumer: every number shown is read from the input files; slope
annotations come straight from the rate columns and are never recomputed.
Exit codes follow the pipeline convention: 2 usage, 3 missing file,
4 malformed input.
"""

import argparse
import csv
import os
import sys

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import matplotlib.tri as mtri  # noqa: E402

SCHEMAS = {
    "stats": ("case", "m", "polygon", "err"),
    "convergence": ("h", "ndof", "mode", "stab", "err0", "err1", "errE",
                    "errInf", "rate0", "rate1", "rateE", "rateInf"),
    "condition": ("h", "ndof", "stab", "kappa"),
    "line": ("t", "x", "y", "value", "value_alt"),
}
SUMMARY_ROWS = ("min", "p05", "mean", "p95", "max")
ERR_COLS = ("err0", "err1", "errE", "errInf")

STYLE = {
    "figure.figsize": (6.0, 4.5),
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "lines.markersize": 4.5,
    "legend.fontsize": 9,
    "savefig.dpi": 150,
}


class RenderError(Exception):
    """Carries the process exit code (3 missing file, 4 bad content)."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- readers

def read_rows(path, kind):
    """Header-checked CSV rows as dicts; strings are kept verbatim."""
    if not os.path.exists(path):
        raise RenderError(3, "no such file: %s" % path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise RenderError(4, "%s: empty file, expected header %s"
                              % (path, ",".join(SCHEMAS[kind])))
        want = SCHEMAS[kind]
        if header != want:
            missing = [c for c in want if c not in header]
            unexpected = [c for c in header if c not in want]
            if not missing and not unexpected:
                diff = "columns out of order"
            else:
                diff = "missing %s; unexpected %s" % (
                    ",".join(missing) or "-", ",".join(unexpected) or "-")
            raise RenderError(4, "%s: header mismatch for kind %r: %s"
                              % (path, kind, diff))
        rows = [dict(zip(header, rec)) for rec in reader]
    if not rows:
        raise RenderError(4, "%s: no data rows" % path)
    return rows


def _float(row, col, path):
    try:
        return float(row[col])
    except ValueError:
        raise RenderError(4, "%s: bad %s value %r" % (path, col, row[col]))


def read_field(path):
    """Parse a VEMFIELD v1 file into (mode, jump_text, tri_list)."""
    if not os.path.exists(path):
        raise RenderError(3, "no such file: %s" % path)
    with open(path) as fh:
        lines = fh.read().split("\n")

    def bad(lineno, why):
        return RenderError(4, "%s:%d: %s" % (path, lineno, why))

    if not lines or lines[0] != "VEMFIELD v1":
        raise bad(1, "expected magic line 'VEMFIELD v1'")
    head = {}
    for k, key in enumerate(("mode", "jump", "cells"), start=1):
        parts = lines[k].split(None, 1) if k < len(lines) else []
        if len(parts) != 2 or parts[0] != key:
            raise bad(k + 1, "expected '%s <value>'" % key)
        head[key] = parts[1]
    try:
        ncells = int(head["cells"])
    except ValueError:
        raise bad(4, "bad cell count %r" % head["cells"])
    if ncells <= 0:
        raise bad(4, "no cells")

    cells, pos = [], 4
    for _ in range(ncells):
        if pos >= len(lines):
            raise bad(len(lines), "truncated: expected 'cell ...' record")
        parts = lines[pos].split()
        if len(parts) != 4 or parts[0] != "cell":
            raise bad(pos + 1, "expected 'cell <i> <npts> <ntris>'")
        try:
            npts, ntris = int(parts[2]), int(parts[3])
        except ValueError:
            raise bad(pos + 1, "bad cell record %r" % lines[pos])
        pos += 1
        try:
            pts = [[float(t) for t in lines[pos + i].split()]
                   for i in range(npts)]
            tris = [[int(t) for t in lines[pos + npts + i].split()]
                    for i in range(ntris)]
        except (ValueError, IndexError):
            raise bad(pos + 1, "bad cell body")
        if any(len(p) != 3 for p in pts) or any(len(t) != 3 for t in tris):
            raise bad(pos + 1, "bad cell body")
        cells.append((pts, tris))
        pos += npts + ntris
    return head["mode"], head["jump"], cells


# ---------------------------------------------------------------- figures

def _series(rows, keycols):
    """Group rows by the key columns, preserving file order."""
    out = {}
    for r in rows:
        out.setdefault(tuple(r[c] for c in keycols), []).append(r)
    return out


def fig_stats(paths, opts):
    rows = read_rows(paths[0], "stats")
    summary = [r for r in rows if r["polygon"] in SUMMARY_ROWS]
    if not summary:
        raise RenderError(4, "%s: no summary rows (min/p05/mean/p95/max)"
                          % paths[0])
    cases = list(dict.fromkeys(r["case"] for r in summary))
    fig, axes = plt.subplots(1, len(cases), squeeze=False,
                             figsize=(5.0 * len(cases), 4.0))
    dressing = {"min": ":", "p05": "--", "mean": "o-", "p95": "--",
                "max": ":"}
    for ax, case in zip(axes[0], cases):
        per = _series([r for r in summary if r["case"] == case], ("polygon",))
        for stat in SUMMARY_ROWS:
            recs = per.get((stat,), [])
            ms = [int(r["m"]) for r in recs]
            errs = [_float(r, "err", paths[0]) for r in recs]
            ax.semilogy(ms, errs, dressing[stat], label=stat)
        ax.set_xlabel("basis size M")
        ax.set_ylabel("relative H1 error")
        ax.set_title(case)
        ax.legend()
    fig.suptitle(opts.title or "reconstruction error statistics")
    return fig


def fig_convergence(paths, opts):
    rows = read_rows(paths[0], "convergence")
    rate_col = "rate" + opts.err_col[3:]
    fig, ax = plt.subplots()
    for (mode, stab), recs in _series(rows, ("mode", "stab")).items():
        hs = [_float(r, "h", paths[0]) for r in recs]
        errs = [_float(r, opts.err_col, paths[0]) for r in recs]
        (ln,) = ax.loglog(hs, errs, "o-", label="%s, %s" % (mode, stab))
        rate = recs[-1][rate_col]
        if rate:
            # annotation text is the CSV cell verbatim
            ax.annotate("slope %s" % rate, xy=(hs[-1], errs[-1]),
                        xytext=(6, -10), textcoords="offset points",
                        color=ln.get_color(), fontsize=9)
    ax.set_xlabel("h")
    ax.set_ylabel(opts.err_col)
    ax.set_title(opts.title or "convergence (%s)" % opts.err_col)
    ax.legend()
    return fig


def fig_condition(paths, opts):
    rows = read_rows(paths[0], "condition")
    fig, ax = plt.subplots()
    for (stab,), recs in _series(rows, ("stab",)).items():
        hs = [_float(r, "h", paths[0]) for r in recs]
        ks = [_float(r, "kappa", paths[0]) for r in recs]
        ax.loglog(hs, ks, "o-", label=stab)
    ax.set_xlabel("h")
    ax.set_ylabel("condition number")
    ax.set_title(opts.title or "interior-matrix conditioning")
    ax.legend()
    return fig


def fig_line(paths, opts):
    fig, ax = plt.subplots()
    for path in paths:
        rows = read_rows(path, "line")
        t = [_float(r, "t", path) for r in rows]
        val = [_float(r, "value", path) for r in rows]
        alt = [_float(r, "value_alt", path) for r in rows]
        stem = os.path.splitext(os.path.basename(path))[0]
        (ln,) = ax.plot(t, val, label=stem)
        if any(a != b for a, b in zip(val, alt)):
            ax.plot(t, alt, "--", color=ln.get_color(),
                    label="%s (other side)" % stem)
    ax.set_xlabel("t along segment")
    ax.set_ylabel("value")
    ax.set_title(opts.title or "line reconstruction")
    ax.legend()
    return fig


def fig_field(paths, opts):
    mode, jump, cells = read_field(paths[0])
    fig, ax = plt.subplots(figsize=(5.4, 4.8))
    lo = min(p[2] for pts, _ in cells for p in pts)
    hi = max(p[2] for pts, _ in cells for p in pts)
    if lo == hi:
        hi = lo + 1.0  # flat field still renders
    art = None
    for pts, tris in cells:
        tri = mtri.Triangulation([p[0] for p in pts], [p[1] for p in pts],
                                 tris)
        art = ax.tripcolor(tri, [p[2] for p in pts], shading="gouraud",
                           vmin=lo, vmax=hi)
    fig.colorbar(art, ax=ax)
    ax.set_aspect("equal")
    # header text verbatim, so the caption can be checked against the file
    ax.set_title(opts.title or "mode %s, conformity jump %s" % (mode, jump))
    return fig


KINDS = {
    "stats": fig_stats,
    "convergence": fig_convergence,
    "condition": fig_condition,
    "line": fig_line,
    "field": fig_field,
}


# ---------------------------------------------------------------- driver

def build_figure(kind, paths, opts):
    plt.rcParams.update(STYLE)
    if kind != "line" and len(paths) != 1:
        raise RenderError(2, "kind %r takes exactly one --in file" % kind)
    return KINDS[kind](paths, opts)


def build_parser():
    ap = argparse.ArgumentParser(
        prog="render.py",
        description="Render figures from the pipeline's CSV/VEMFIELD files; "
                    "slopes and captions repeat the inputs verbatim.")
    ap.add_argument("--kind", required=True, choices=sorted(KINDS))
    ap.add_argument("--in", dest="inputs", required=True, nargs="+",
                    metavar="PATH",
                    help="input file(s); only --kind line overlays several")
    ap.add_argument("--out", required=True, help="output image path")
    ap.add_argument("--err-col", default="err1", choices=ERR_COLS,
                    help="error column for --kind convergence")
    ap.add_argument("--title", default=None)
    return ap


def run(argv=None):
    args = build_parser().parse_args(argv)
    try:
        fig = build_figure(args.kind, args.inputs, args)
        # strip the library's Software tag so identical inputs give
        # identical bytes
        fig.savefig(args.out, metadata={"Software": None})
        plt.close(fig)
    except RenderError as exc:
        print("render: %s" % exc, file=sys.stderr)
        return exc.code
    print("wrote %s" % args.out)
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
