import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from section_forge.forms import (
    Box,
    ContractibleCover,
    DiscreteKForm,
    axis_periods,
    closed_projection,
    compound,
    cylinder_ends,
    exterior_derivative,
    form_norm,
    form_norm_estimate,
    homotopy_operator,
    interior_components,
    multi_indices,
    pointwise_norm,
    pullback,
    random_smooth_form,
    sample_form,
    simpson_weights,
    wedge,
    wedge_components,
)
from section_forge.grid import GridGeometry

TWO_PI = 2 * np.pi


def torus(n, dims=32):
    return GridGeometry.periodic_box((dims,) * n)


def cylinder(n_base, h=2.0 ** -6, nodes=33):
    m = int(round(1 / h))
    return GridGeometry((m,) * n_base + (nodes,), (h,) * n_base + (1 / (nodes - 1),),
                        (0.0,) * (n_base + 1), (True,) * n_base + (False,))


def random_cylinder_form(geo, k, rng, max_mode=2):
    """Smooth random k-form on T^m x [0, 1]: trig in x, low-degree polynomial times exp in t."""
    pts = np.moveaxis(geo.points(), -1, 0)
    comps = np.zeros((math.comb(geo.ndim, k),) + geo.dims)
    for a in range(comps.shape[0]):
        for _ in range(3):
            modes = rng.integers(-max_mode, max_mode + 1, size=geo.ndim - 1)
            arg = sum(TWO_PI * modes[i] * pts[i] for i in range(geo.ndim - 1)) + rng.uniform(0, TWO_PI)
            c0, c1, c2 = rng.normal(size=3)
            comps[a] += rng.normal() * np.cos(arg) * (c0 + c1 * pts[-1] + c2 * pts[-1] ** 2) * np.exp(
                rng.uniform(-1, 1) * pts[-1])
    return DiscreteKForm(k, geo, comps)


matrices = st.lists(st.floats(-3, 3), min_size=9, max_size=9).map(lambda v: np.array(v).reshape(3, 3))


class TestAlgebra:
    def test_compound_degree_one_is_transpose(self):
        J = np.arange(9.0).reshape(3, 3)
        assert np.array_equal(compound(J, 1), J.T)

    @settings(max_examples=100, deadline=None)
    @given(matrices)
    def test_compound_top_degree_is_det(self, J):
        assert compound(J, 3)[0, 0] == pytest.approx(np.linalg.det(J), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(matrices, matrices, st.integers(0, 3))
    def test_compound_antihomomorphism(self, J1, J2, k):
        # (F o G)^* = G^* F^*
        lhs = compound(J1 @ J2, k)
        rhs = compound(J2, k) @ compound(J1, k)
        assert np.allclose(lhs, rhs, atol=1e-8 * (1 + np.abs(lhs).max()))

    def test_basic_wedge(self):
        dx = np.array([[1.0], [0.0], [0.0]])
        dy = np.array([[0.0], [1.0], [0.0]])
        out = wedge_components(dy, 1, dx, 1, 3)
        assert out[multi_indices(3, 2).index((0, 1)), 0] == -1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2), st.integers(0, 2), st.integers(0, 2 ** 32 - 1))
    def test_graded_commutativity(self, k, l, seed):
        rng = np.random.default_rng(seed)
        n = 4
        a = rng.normal(size=(math.comb(n, k), 1))
        b = rng.normal(size=(math.comb(n, l), 1))
        assert np.allclose(wedge_components(a, k, b, l, n), (-1) ** (k * l) * wedge_components(b, l, a, k, n))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 2), st.integers(0, 2 ** 32 - 1))
    def test_interior_antiderivation(self, k, l, seed):
        rng = np.random.default_rng(seed)
        n = 5
        a = rng.normal(size=(math.comb(n, k), 1))
        b = rng.normal(size=(math.comb(n, l), 1))
        v = rng.normal(size=(n, 1))
        lhs = interior_components(v, wedge_components(a, k, b, l, n), k + l, n)
        rhs = wedge_components(interior_components(v, a, k, n), k - 1, b, l, n) + (-1) ** k * wedge_components(
            a, k, interior_components(v, b, l, n), l - 1, n)
        assert np.allclose(lhs, rhs)


class TestNorms:
    def test_one_form_euclidean(self):
        c = np.array([[3.0], [4.0]])
        assert pointwise_norm(c, 1, 2)[0][0] == 5.0

    def test_one_form_metric(self):
        # |dx| in the metric diag(4, 1) is 1/2
        c = np.array([[1.0], [0.0]])
        val, method = pointwise_norm(c, 1, 2, np.diag([4.0, 1.0]))
        assert val[0] == pytest.approx(0.5) and method == "exact"

    def test_two_form_is_top_singular_value(self):
        rng = np.random.default_rng(3)
        c = rng.normal(size=(6, 1))
        mat = np.zeros((4, 4))
        for a, (i, j) in enumerate(multi_indices(4, 2)):
            mat[i, j], mat[j, i] = c[a, 0], -c[a, 0]
        # brute-force oracle: max over many random unit pairs never exceeds, nearly reaches
        v = rng.normal(size=(200000, 4))
        w = rng.normal(size=(200000, 4))
        v /= np.linalg.norm(v, axis=1)[:, None]
        w -= np.sum(w * v, axis=1)[:, None] * v
        w /= np.linalg.norm(w, axis=1)[:, None]
        sampled = np.max(np.abs(np.einsum("pi,ij,pj->p", v, mat, w)))
        exact = pointwise_norm(c, 2, 4)[0][0]
        assert sampled <= exact * (1 + 1e-12)
        assert sampled > 0.97 * exact

    def test_sampled_degree_is_tagged(self):
        geo = torus(6, dims=2)
        xi = DiscreteKForm(3, geo, np.ones((20,) + geo.dims))
        est = form_norm_estimate(xi)
        assert est.method == "sampled" and est.value >= 1.0


class TestDerivative:
    @pytest.mark.parametrize("order,rate", [(2, 2), (4, 4)])
    def test_convergence(self, order, rate):
        errs = []
        for N in (32, 64):
            geo = torus(2, N)
            f = DiscreteKForm.from_functions(0, geo, {(): lambda x, y: np.sin(TWO_PI * x) * np.cos(TWO_PI * y)})
            df = exterior_derivative(f, order)
            exact = DiscreteKForm.from_functions(1, geo, {
                (0,): lambda x, y: TWO_PI * np.cos(TWO_PI * x) * np.cos(TWO_PI * y),
                (1,): lambda x, y: -TWO_PI * np.sin(TWO_PI * x) * np.sin(TWO_PI * y)})
            errs.append(form_norm(df - exact))
        assert math.log2(errs[0] / errs[1]) == pytest.approx(rate, abs=0.15)

    def test_curl_of_one_form(self):
        geo = torus(2, 64)
        xi = DiscreteKForm.from_functions(1, geo, {(0,): lambda x, y: np.sin(TWO_PI * y)})
        d = exterior_derivative(xi, 4)
        # d(sin(2 pi y) dx) = -2 pi cos(2 pi y) dx^dy
        y = geo.points()[..., 1]
        assert np.max(np.abs(d.components[0] + TWO_PI * np.cos(TWO_PI * y))) < 1e-4

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(0, 1))
    def test_dd_zero_periodic(self, seed, k):
        xi = random_smooth_form(torus(3, 16), k, np.random.default_rng(seed), max_mode=3)
        assert form_norm(exterior_derivative(exterior_derivative(xi))) < 1e-10 * (1 + form_norm(xi))

    @pytest.mark.parametrize("order", [2, 4])
    def test_dd_open_axis(self, order):
        # stencils along distinct axes commute, one-sided ends included
        geo = GridGeometry((32, 33), (1 / 32, 1 / 32), (0.0, 0.0), (True, False))
        f = DiscreteKForm.from_functions(0, geo, {(): lambda x, y: np.cos(TWO_PI * x) * np.exp(2 * y)})
        assert form_norm(exterior_derivative(exterior_derivative(f, order), order)) < 1e-10

    def test_top_degree_rejected(self):
        with pytest.raises(ValueError):
            exterior_derivative(DiscreteKForm.zeros(2, torus(2, 8)))

    def test_twisted_constant_forms(self):
        A = np.array([[2, 1], [1, 1]])
        geo = GridGeometry.mapping_torus(A, 16, 16)
        ds = DiscreteKForm.from_functions(1, geo, {(2,): lambda x, y, s: np.ones_like(s)})
        assert form_norm(exterior_derivative(ds)) == 0.0

    def test_twisted_seam_pulls_back(self):
        # a 1-form a(s) dx away from the seam plus its glued copy: the ghost above the top row
        # is the A-pullback of the bottom row, so d of a seam-compatible form stays small
        A = np.array([[2, 1], [1, 1]])
        N = 64
        geo = GridGeometry.mapping_torus(A, N, N)
        bump = lambda s: np.exp(-((s - 0.5) / 0.08) ** 2)
        f = DiscreteKForm.from_functions(0, geo, {(): lambda x, y, s: bump(s) * np.sin(TWO_PI * x)})
        assert form_norm(exterior_derivative(exterior_derivative(f))) < 1e-10


class TestPullback:
    def test_identity(self):
        geo = torus(2, 16)
        xi = random_smooth_form(geo, 1, np.random.default_rng(0))
        ident = lambda p: (p, np.broadcast_to(np.eye(2), p.shape[:-1] + (2, 2)))
        assert np.allclose(pullback(ident, xi).components, xi.components, atol=1e-14)

    def test_translation_of_dx(self):
        geo = torus(2, 16)
        dx = DiscreteKForm.from_functions(1, geo, {(0,): lambda x, y: np.ones_like(x)})
        shift = lambda p: (p + [0.37, 0.11], np.broadcast_to(np.eye(2), p.shape[:-1] + (2, 2)))
        assert np.allclose(pullback(shift, dx).components, dx.components)

    def test_linear_map(self):
        A = np.array([[2.0, 1.0], [1.0, 1.0]])
        geo = torus(2, 16)
        dx = DiscreteKForm.from_functions(1, geo, {(0,): lambda x, y: np.ones_like(x)})
        lin = lambda p: (np.mod(p @ A.T, 1.0), np.broadcast_to(A, p.shape[:-1] + (2, 2)))
        out = pullback(lin, dx)
        # F^* dx = d(A11 x + A12 y) = A11 dx + A12 dy
        assert np.allclose(out.components[0], A[0, 0]) and np.allclose(out.components[1], A[0, 1])

    def test_open_axis_out_of_domain(self):
        geo = GridGeometry((8, 9), (0.125, 0.125), (0.0, 0.0), (True, False))
        xi = DiscreteKForm.zeros(1, geo)
        with pytest.raises(ValueError):
            sample_form(xi, np.array([[0.1, 1.2]]))

    def test_interpolation_exact_on_affine(self):
        geo = GridGeometry((9, 9), (0.125, 0.125), (0.0, 0.0), (False, False))
        f = DiscreteKForm.from_functions(0, geo, {(): lambda x, y: 2 * x - 3 * y + 1})
        pts = np.random.default_rng(1).uniform(0, 1, size=(50, 2))
        assert np.allclose(sample_form(f, pts)[0], 2 * pts[:, 0] - 3 * pts[:, 1] + 1)


class TestHomotopy:
    def test_no_dt_part(self):
        geo = cylinder(1, h=1 / 16, nodes=9)
        om = DiscreteKForm.from_functions(1, geo, {(0,): lambda x, t: np.cos(TWO_PI * x) * t})
        assert np.all(homotopy_operator(om).components == 0)

    def test_constant_fibre_integral(self):
        geo = cylinder(2, h=1 / 8, nodes=5)
        # dt ^ (c dx) = -c dx^dt
        om = DiscreteKForm.from_functions(2, geo, {(0, 2): lambda x, y, t: -2.5 * np.ones_like(t)})
        H = homotopy_operator(om, 5)
        assert np.allclose(H.component((0,)), 2.5) and np.allclose(H.component((1,)), 0)

    def test_even_nodes_rejected(self):
        with pytest.raises(ValueError):
            simpson_weights(4)
        geo = cylinder(1, h=1 / 8, nodes=4)
        with pytest.raises(ValueError):
            homotopy_operator(DiscreteKForm.zeros(1, geo), 4)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3))
    def test_norm_at_most_one(self, seed, k):
        om = random_cylinder_form(cylinder(2, h=1 / 16, nodes=17), k, np.random.default_rng(seed))
        assert form_norm(homotopy_operator(om)) <= form_norm(om) * (1 + 1e-12)

    @pytest.mark.parametrize("order,rate", [(2, 1.7), (4, 3.6)])
    def test_identity_converges_in_nodes(self, order, rate):
        res = []
        for nodes in (17, 33, 65):
            geo = cylinder(2, h=2.0 ** -5, nodes=nodes)
            om = random_cylinder_form(geo, 1, np.random.default_rng(11))
            j0, j1 = cylinder_ends(om)
            lhs = exterior_derivative(homotopy_operator(om), order) + homotopy_operator(
                exterior_derivative(om, order))
            res.append(form_norm(lhs - (j1 - j0)))
        # x-derivatives cancel exactly; what is left is the t-stencil against Simpson
        assert np.all(np.log2(np.array(res[:-1]) / res[1:]) > rate)

    def test_identity_independent_of_base_spacing(self):
        res = []
        for h in (2.0 ** -4, 2.0 ** -5):
            om = random_cylinder_form(cylinder(2, h=h, nodes=17), 2, np.random.default_rng(3), max_mode=1)
            j0, j1 = cylinder_ends(om)
            lhs = exterior_derivative(homotopy_operator(om), 4) + homotopy_operator(exterior_derivative(om, 4))
            res.append(form_norm(lhs - (j1 - j0)) / form_norm(om))
        assert res[1] < 1e-4 and res[0] < 1e-4


class TestClosedProjection:
    def test_closed_form_fixed(self):
        geo = torus(2, 64)
        xi = DiscreteKForm.from_functions(1, geo, {
            (0,): lambda x, y: 1 + np.cos(TWO_PI * x), (1,): lambda x, y: np.zeros_like(x)})
        eta, rep = closed_projection(xi)
        assert rep["norm_xi_minus_eta"] < 1e-12

    def test_wavy_dx(self):
        a = 0.01
        geo = torus(2, 64)
        xi = DiscreteKForm.from_functions(1, geo, {(0,): lambda x, y: 1 + a * np.sin(TWO_PI * y)})
        eta, rep = closed_projection(xi)
        assert rep["norm_d_xi"] == pytest.approx(TWO_PI * a, rel=2e-3)
        assert rep["norm_xi_minus_eta"] <= TWO_PI * a * (1 + 1e-2)
        assert rep["norm_d_eta"] < 1e-12
        assert set(rep) >= {"norm_xi_minus_eta", "norm_d_xi", "norm_d_eta", "tol"}

    def test_dx_class_preserved(self):
        geo = torus(2, 32)
        dx = DiscreteKForm.from_functions(1, geo, {(0,): lambda x, y: np.ones_like(x)})
        eta, _ = closed_projection(dx)
        assert np.allclose(eta.components, dx.components, atol=1e-14)
        assert np.allclose(axis_periods(eta), [1.0, 0.0], atol=1e-14)

    def test_periods_are_loop_averages(self):
        # for non-closed xi the axis periods depend on the loop; eta's equal their average
        geo = torus(2, 32)
        xi = random_smooth_form(geo, 1, np.random.default_rng(2))
        xi = xi.with_components(xi.components + np.array([1.0, -0.5])[:, None, None])
        eta, _ = closed_projection(xi)
        means = [xi.components[i].mean() * geo.extent(i) for i in range(2)]
        assert np.allclose(axis_periods(eta), means, atol=1e-12)
        shifted = eta.with_components(np.roll(eta.components, (5, 9), axis=(1, 2)))
        assert np.allclose(axis_periods(shifted), means, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([(2, 1), (3, 1), (3, 2)]))
    def test_bound(self, seed, nk):
        n, k = nk
        xi = random_smooth_form(torus(n, 24), k, np.random.default_rng(seed))
        eta, rep = closed_projection(xi)
        assert rep["norm_xi_minus_eta"] <= rep["norm_d_xi"] * (1 + 1e-2)
        assert rep["norm_d_eta"] <= 1e-10 * (1 + rep["norm_d_xi"])

    def test_cover_must_cover(self):
        geo = torus(2, 16)
        cover = ContractibleCover((Box((0, 0), (8, 16)),))
        with pytest.raises(ValueError):
            closed_projection(random_smooth_form(geo, 1, np.random.default_rng(0)), cover)

    def test_cone_boxes_reproduce_closed_forms(self):
        geo = torus(2, 48)
        f = lambda x, y: np.sin(TWO_PI * x) * np.cos(TWO_PI * y)
        exact = exterior_derivative(DiscreteKForm.from_functions(0, geo, {(): f}), 4)
        cover = ContractibleCover.regular(geo, (2, 2), overlap=6)
        eta, rep = closed_projection(exact, cover, method="cone", nodes=33)
        for box in rep["local"]:
            assert box["norm_xi_minus_eta"] < 2e-2 * form_norm(exact)
        assert rep["norm_xi_minus_eta"] < 2e-2 * form_norm(exact)

    def test_cone_local_certificate(self):
        geo = torus(2, 48)
        xi = random_smooth_form(geo, 1, np.random.default_rng(4), max_mode=1)
        cover = ContractibleCover.regular(geo, (3, 3), overlap=4)
        _, rep = closed_projection(xi, cover, method="cone", nodes=33)
        for box in rep["local"]:
            assert box["norm_xi_minus_eta"] <= box["norm_d_xi"] * (1 + 5e-2)

    def test_twisted_lsq_recovers_exact_plus_ds(self):
        A = np.array([[2, 1], [1, 1]])
        geo = GridGeometry.mapping_torus(A, 24, 24)
        from section_forge.forms import _scalar_gradient

        rng = np.random.default_rng(0)
        phi = rng.normal(size=geo.dims)
        comps = _scalar_gradient(phi, geo)
        comps[2] += 0.8
        xi = DiscreteKForm(1, geo, comps)
        eta, rep = closed_projection(xi)
        assert rep["method"] == "lsq"
        assert rep["ds_coefficient"] == pytest.approx(0.8, abs=1e-12)
        assert rep["norm_xi_minus_eta"] < 1e-6


def test_save_load(tmp_path):
    geo = torus(3, 4)
    xi = random_smooth_form(geo, 2, np.random.default_rng(0))
    xi.save(tmp_path / "xi")
    back = DiscreteKForm.load(tmp_path / "xi")
    assert back.degree == 2 and back.geometry == geo
    assert np.array_equal(back.components, xi.components)
