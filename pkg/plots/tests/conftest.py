"""Session fixtures: tiny real inputs produced by the vemrb command line."""
import subprocess
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

RENDER = Path(__file__).resolve().parents[1] / "render.py"


def cli(*args):
    res = subprocess.run(["vemrb"] + [str(a) for a in args],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    return res


def render(*args):
    return subprocess.run([sys.executable, str(RENDER)]
                          + [str(a) for a in args],
                          capture_output=True, text=True)


@pytest.fixture(scope="session")
def inputs(tmp_path_factory):
    root = tmp_path_factory.mktemp("inputs")
    cli("mesh", "--cells", 25, "--seed", 1, "--out", root / "mesh.txt")
    cli("offline", "--n", "4,5,6,7,8,9,10", "--train", 8, "--mmax", 2,
        "--level", 2, "--seed", 1, "--out", root / "db")
    cli("convergence", "--problem", "poisson", "--cells", "25,64",
        "--stabs", "dofi,rb:1", "--modes", "pi", "--db", root / "db",
        "--cond", "--seed", 1, "--out", root / "conv")
    cli("validate", "--db", root / "db", "--n", 6, "--tests", 4,
        "--m", "0,1,2", "--seed", 1, "--out", root / "stats.csv")
    cli("solve", "--mesh", root / "mesh.txt", "--problem", "poisson",
        "--stab", "dofi", "--out", root / "sol.txt")
    cli("reconstruct", "--mesh", root / "mesh.txt", "--sol", root / "sol.txt",
        "--mode", "pi", "--line", "0.1,0.4,0.9,0.4", "--samples", 25,
        "--line-out", root / "line_pi.csv", "--out", root / "field.vf")
    cli("reconstruct", "--mesh", root / "mesh.txt", "--sol", root / "sol.txt",
        "--mode", "rb:1", "--db", root / "db", "--line", "0.1,0.4,0.9,0.4",
        "--samples", 25, "--line-out", root / "line_rb.csv",
        "--out", root / "field_rb.vf")
    return root
