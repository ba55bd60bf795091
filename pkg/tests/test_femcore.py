import numpy as np
import pytest

from vemrb import femcore as fc
from vemrb import geometry as geo
from vemrb.errors import InvalidArgument, ResourceLimit

from oracles import p1_stiffness_dense, integrate_mesh

SQUARE = geo.Polygon(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))


def test_square_level0_counts():
    mesh = fc.triangulate(SQUARE, level=0)
    assert mesh.nnodes == 5
    assert mesh.ntris == 4
    assert mesh.boundary.sum() == 4
    assert np.allclose(sorted(mesh.nodes[~mesh.boundary][0]), [0.5, 0.5])


def test_delta_picks_coarsest_admissible_level():
    # longest fan edge of the unit square is a side of length 1
    mesh = fc.triangulate(SQUARE, delta=1.5)
    assert mesh.level == 0
    mesh = fc.triangulate(SQUARE, delta=0.4)
    assert mesh.level == 2  # level 1 still has 0.5-long edges
    # postcondition: every fine edge is <= delta
    e = mesh.nodes[mesh.tris] - mesh.nodes[np.roll(mesh.tris, -1, axis=1)]
    assert np.sqrt((e ** 2).sum(-1)).max() <= 0.4 + 1e-12


@pytest.mark.parametrize("n,level", [(3, 0), (4, 2), (6, 3), (9, 1)])
def test_node_count_formula_and_areas(n, level):
    p = geo.reference_polygon(n)
    mesh = fc.triangulate(p, level=level)
    m = 2 ** level
    assert mesh.nnodes == fc.lattice_node_count(n, level)
    assert mesh.ntris == n * m * m
    assert mesh.boundary.sum() == n * m
    area, _ = fc.tri_geometry(mesh.nodes, mesh.tris)
    assert area.min() > 0.0
    assert area.sum() == pytest.approx(p.area, rel=1e-12)
    assert np.bincount(mesh.fan_of_tri, minlength=n).tolist() == [m * m] * n


def test_same_shape_same_connectivity():
    # the lattice numbering is combinatorial: any two hexagons at one level
    # share connectivity, boundary layout, and edge parameters exactly
    rng = np.random.default_rng(0)
    a = fc.triangulate(geo.generate_convex_polygon(6, rng), level=3)
    b = fc.triangulate(geo.generate_convex_polygon(6, rng), level=3)
    assert np.array_equal(a.tris, b.tris)
    assert np.array_equal(a.boundary, b.boundary)
    assert np.array_equal(a.bedge, b.bedge)
    assert np.array_equal(a.bfrac, b.bfrac)
    assert np.array_equal(a.fan_of_tri, b.fan_of_tri)


def test_node_cap():
    with pytest.raises(ResourceLimit):
        fc.triangulate(geo.reference_polygon(6), level=12)


def test_stiffness_unit_right_triangle_frozen():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2]])
    A = fc.assemble_stiffness(nodes, tris).toarray()
    expect = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]])
    assert np.allclose(A, expect, atol=1e-14)


def test_stiffness_matches_dense_oracle_nonsymmetric():
    p = geo.generate_convex_polygon(5, np.random.default_rng(4))
    mesh = fc.triangulate(p, level=2)
    K = np.array([[1.0, 1e-2], [5e-3, 1e-4]])
    A = fc.assemble_stiffness(mesh, K).toarray()
    B = p1_stiffness_dense(mesh.nodes, mesh.tris, K)
    assert np.allclose(A, B, atol=1e-13)
    # per-triangle tensor route: constant array must agree with the 2x2 route
    Kt = np.repeat(K[None], mesh.ntris, axis=0)
    At = fc.assemble_stiffness(mesh, Kt).toarray()
    assert np.allclose(A, At, atol=1e-15)


def test_dirichlet_reproduces_linear_exactly():
    mesh = fc.triangulate(SQUARE, level=3)
    g = 1.0 + 2.0 * mesh.nodes[:, 0] - 0.7 * mesh.nodes[:, 1]
    u = fc.solve_dirichlet(mesh, None, g)
    assert np.abs(u - g).max() < 1e-12


def test_dirichlet_bilinear_second_order():
    # u = (1-x)(1-y) is harmonic.  On this symmetric lattice the nodal values
    # come out exact, so the L-inf rate must be read off-node: max over a
    # fixed interior sample grid drops ~4x per level, and so does L2.
    xx, yy = np.meshgrid(np.linspace(0.05, 0.95, 19), np.linspace(0.05, 0.95, 19))
    samples = np.column_stack([xx.ravel(), yy.ravel()])
    ue = lambda x, y: (1.0 - x) * (1.0 - y)
    ge = lambda x, y: (-(1.0 - y), -(1.0 - x))
    linf, l2 = [], []
    for lvl in (1, 2, 3):
        mesh = fc.triangulate(SQUARE, level=lvl)
        exact = ue(mesh.nodes[:, 0], mesh.nodes[:, 1])
        u = fc.solve_dirichlet(mesh, None, exact)
        assert np.abs(u - exact).max() < 1e-12  # nodal superconvergence
        uh = fc.interpolate(mesh, u, samples)
        linf.append(np.abs(uh - ue(samples[:, 0], samples[:, 1])).max())
        l2.append(fc.error_norms_vs(mesh, u, ue, ge)["err_l2"])
    for errs in (linf, l2):
        r1 = np.log2(errs[0] / errs[1])
        r2 = np.log2(errs[1] / errs[2])
        assert 1.6 < r1 < 2.4
        assert 1.6 < r2 < 2.4


def test_basis_partition_of_unity_and_bounds():
    p = geo.generate_convex_polygon(6, np.random.default_rng(1))
    mesh, basis = fc.vem_basis_all(p, level=3)
    assert np.abs(basis.sum(0) - 1.0).max() < 1e-11
    # obtuse fan triangles allow a small undershoot that dies out under
    # refinement; at level 6 it sits below 1e-8
    assert basis.min() > -1e-4 and basis.max() < 1.0 + 1e-4
    _, fine = fc.vem_basis_all(p, level=6)
    assert fine.min() > -1e-8 and fine.max() < 1.0 + 1e-8
    # vertex interpolation: e_j(v_i) = delta_ij
    for j in range(p.n):
        f = fc.vem_basis_fe(p, j, level=2)
        vals = fc.interpolate(f.mesh, f.values, p.vertices)
        expect = np.zeros(p.n)
        expect[j] = 1.0
        assert np.allclose(vals, expect, atol=1e-12)


def test_interpolate_linear_reproduction_and_scan_agreement():
    p = geo.generate_convex_polygon(7, np.random.default_rng(2))
    mesh = fc.triangulate(p, level=3)
    lin = 0.3 + 1.7 * mesh.nodes[:, 0] - 0.9 * mesh.nodes[:, 1]
    rng = np.random.default_rng(3)
    w = rng.random((50, p.n))
    w /= w.sum(1)[:, None]
    pts = w @ p.vertices
    vals = fc.interpolate(mesh, lin, pts)
    assert np.allclose(vals, 0.3 + 1.7 * pts[:, 0] - 0.9 * pts[:, 1], atol=1e-12)
    rough = rng.standard_normal(mesh.nnodes)
    a = fc.interpolate(mesh, rough, pts)
    b = fc.interpolate_scan(mesh, rough, pts)
    assert np.allclose(a, b, atol=1e-11)
    # nodes reproduce themselves, boundary vertices included
    nv = fc.interpolate(mesh, rough, mesh.nodes)
    assert np.allclose(nv, rough, atol=1e-11)
    with pytest.raises(InvalidArgument):
        fc.interpolate(mesh, rough, np.array([[5.0, 5.0]]))


def test_integrate_quadratic_frozen():
    tri = geo.Polygon(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    mesh = fc.triangulate(tri, level=1)
    val = fc.integrate(mesh, lambda x, y: x * x + x * y)
    assert val == pytest.approx(1.0 / 8.0, abs=1e-14)  # hand integral
    oracle = integrate_mesh(mesh.nodes, mesh.tris, lambda x, y: x * x + x * y)
    assert val == pytest.approx(oracle, abs=1e-14)


def test_error_norms_frozen_linear():
    mesh = fc.triangulate(SQUARE, level=4)
    u = lambda x, y: 1.0 + 2.0 * x + 3.0 * y
    gu = lambda x, y: (2.0 * np.ones_like(x), 3.0 * np.ones_like(y))
    vals = u(mesh.nodes[:, 0], mesh.nodes[:, 1])
    K = np.diag([2.0, 1.0])
    r = fc.error_norms_vs(mesh, vals, u, gu, K=K)
    assert r["err_l2"] < 1e-13 and r["err_h1"] < 1e-12 and r["err_inf"] < 1e-13
    # hand integrals over the unit square
    assert r["ref_l2"] == pytest.approx(np.sqrt(40.0 / 3.0), rel=1e-12)
    assert r["ref_h1"] == pytest.approx(np.sqrt(13.0), rel=1e-12)
    assert r["ref_en"] == pytest.approx(np.sqrt(17.0), rel=1e-12)


def test_cg_fallback_matches_direct(monkeypatch):
    p = geo.reference_polygon(5)
    mesh = fc.triangulate(p, level=3)
    g = mesh.nodes[:, 0] ** 2 - mesh.nodes[:, 1]
    direct = fc.solve_dirichlet(mesh, None, g)
    monkeypatch.setattr(fc, "DIRECT_LIMIT", 0)
    iterative = fc.solve_dirichlet(mesh, None, g)
    assert np.abs(direct - iterative).max() < 1e-9
