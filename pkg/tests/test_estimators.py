import math

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from hbplate.assembly import (
    GeometryMap,
    PlateProblem,
    apply_dirichlet,
    assemble_system,
    h2_seminorm_error,
    solve,
)
from hbplate.estimators import (
    assemble_blocks,
    build_bubble_space,
    effectivity,
    estimate,
    eta_elements,
    natural_boundary_sides,
    residual_estimator,
    solve_blocks,
)
from hbplate.hierarchy import ElementId, HierarchicalSpace
from hbplate.splines import eval_bernstein_ders

IDENTITY = GeometryMap.identity()
ALL = ("left", "bottom", "right", "top")


def spline_exact_problem():
    def trace(x, y):
        return x**2 * y**2
    def moment(x, y):
        return np.where((np.asarray(x) == 0.0) | (np.asarray(x) == 1.0),
                        2.0 * np.asarray(y)**2, 2.0 * np.asarray(x)**2)
    return PlateProblem(
        g=lambda x, y: np.full_like(np.asarray(x, dtype=float), 8.0),
        dirichlet_w={s: trace for s in ALL},
        neumann_M={s: moment for s in ALL},
    )


def smooth_problem():
    g = lambda x, y: 64.0 * np.pi**4 * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
    return PlateProblem(g=g,
                        dirichlet_w={s: 0.0 for s in ALL},
                        neumann_M={s: 0.0 for s in ALL})


def solve_problem(space, problem):
    system = apply_dirichlet(assemble_system(space, IDENTITY, problem), space, problem)
    return solve(system)


def smooth_hessian(x, y):
    s = np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
    c = np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y)
    return (-4 * np.pi**2 * s, 4 * np.pi**2 * c, -4 * np.pi**2 * s)


class TestBubbleSpace:
    def test_interior_counts(self):
        for p, count in [(3, 1), (4, 4), (5, 9)]:
            space = HierarchicalSpace.create(3, p)
            bubbles = build_bubble_space(space.mesh, p)
            inner = ElementId(0, 1, 1)
            assert len(bubbles.per_element[inner]) == count
            if p == 3:
                assert bubbles.per_element[inner] == [(2, 2)]

    def test_moment_side_adds_rotation_bubbles(self):
        p = 4
        space = HierarchicalSpace.create(3, p)
        bubbles = build_bubble_space(space.mesh, p, {"bottom": {"moment"}})
        edge = ElementId(0, 1, 0)
        pairs = bubbles.per_element[edge]
        assert len(pairs) == 4 + (p - 2)
        assert set(pairs) == {(2, 2), (2, 3), (3, 2), (3, 3), (2, 1), (3, 1)}
        inner = ElementId(0, 1, 1)
        assert len(bubbles.per_element[inner]) == 4

    def test_shear_side_adds_value_bubbles(self):
        p = 4
        space = HierarchicalSpace.create(3, p)
        bubbles = build_bubble_space(space.mesh, p, {"right": {"shear"}})
        edge = ElementId(0, 2, 1)
        q = p + 1
        assert (q, 2) in bubbles.per_element[edge]

    def test_interior_bubble_vanishes_with_gradient_on_boundary(self):
        for p in (3, 4, 5):
            q = p + 1
            ts = np.linspace(0, 1, 20)
            for i in range(2, q - 1):
                for t in (0.0, 1.0):
                    ev = eval_bernstein_ders(q, t, 1)
                    assert abs(ev.values[i]) <= 1e-12
                    assert abs(ev.d1[i]) <= 1e-12
            # tensor bubble trace along a full edge
            i, j = 2, q - 2
            for t in ts:
                edge_val = eval_bernstein_ders(q, 0.0).values[i] * \
                    eval_bernstein_ders(q, t).values[j]
                assert abs(edge_val) <= 1e-12

    def test_rotation_bubble_is_value_free_on_its_side(self):
        q = 5
        ev = eval_bernstein_ders(q, 0.0, 1)
        assert ev.values[1] == pytest.approx(0.0, abs=1e-15)
        assert ev.d1[1] == pytest.approx(q)

    def test_unsupported_degree(self):
        space = HierarchicalSpace.create(2, 3)
        with pytest.raises(ValueError):
            build_bubble_space(space.mesh, 2)


class TestBlocks:
    def test_spline_exact_solution_has_vanishing_residuals(self):
        space = HierarchicalSpace.create(3, 3)
        prob = spline_exact_problem()
        u = solve_problem(space, prob)
        bubbles = build_bubble_space(space.mesh, 3, natural_boundary_sides(prob))
        blocks = assemble_blocks(bubbles, u, space, IDENTITY, prob)
        scale = math.sqrt(float(u.coefficients @ (
            assemble_system(space, IDENTITY, prob).matrix @ u.coefficients)))
        for blk in blocks:
            assert np.linalg.norm(blk.rhs) <= 1e-9 * max(scale, 1.0)

    def test_doubling_load_doubles_rhs_for_zero_field(self):
        from hbplate.assembly import DiscreteField
        space = HierarchicalSpace.create(2, 3)
        prob1 = smooth_problem()
        prob2 = PlateProblem(
            g=lambda x, y: 2.0 * prob1.g(x, y),
            dirichlet_w=prob1.dirichlet_w, neumann_M=prob1.neumann_M)
        zero = DiscreteField(np.zeros(space.num_dofs))
        bubbles = build_bubble_space(space.mesh, 3, natural_boundary_sides(prob1))
        b1 = assemble_blocks(bubbles, zero, space, IDENTITY, prob1)
        b2 = assemble_blocks(bubbles, zero, space, IDENTITY, prob2)
        for x, y in zip(b1, b2):
            np.testing.assert_allclose(y.rhs, 2.0 * x.rhs, rtol=1e-13)

    def test_p3_interior_block_is_bubble_energy(self):
        # oracle: integrate the degree-4 (2,2) tensor bubble energy exactly
        space = HierarchicalSpace.create(2, 3)
        from hbplate.assembly import DiscreteField
        zero = DiscreteField(np.zeros(space.num_dofs))
        prob = smooth_problem()
        bubbles = build_bubble_space(space.mesh, 3)
        blocks = assemble_blocks(bubbles, zero, space, IDENTITY, prob)
        bpoly = np.poly1d([0.0])
        for k in range(3):  # B_{2,4} = C(4,2) t^2 (1-t)^2
            bpoly = bpoly + math.comb(4, 2) * math.comb(2, k) * (-1.0)**k * \
                np.poly1d([1.0] + [0.0] * (2 + k))
        d2 = np.polyder(bpoly, 2)
        d1 = np.polyder(bpoly, 1)
        def integral(poly):
            integ = np.polyint(poly)
            return integ(1.0) - integ(0.0)
        h = 0.5
        ixx = integral(np.polymul(d2, d2)) / h**3 * integral(np.polymul(bpoly, bpoly)) * h
        ixy = integral(np.polymul(d1, d1)) / h * integral(np.polymul(d1, d1)) / h
        energy = 2 * ixx + 2 * ixy
        for blk in blocks:
            assert blk.matrix.shape == (1, 1)
            assert blk.matrix[0, 0] == pytest.approx(energy, rel=1e-12)

    def test_block_diagonal_equivalence_with_global_system(self):
        # oracle: assemble one global sparse system over all bubbles at once
        space = HierarchicalSpace.create(3, 3)
        space = space.refined([ElementId(0, 0, 0)], m=2)
        prob = smooth_problem()
        u = solve_problem(space, prob)
        bubbles = build_bubble_space(space.mesh, 3, natural_boundary_sides(prob))
        blocks = solve_blocks(assemble_blocks(bubbles, u, space, IDENTITY, prob))
        offsets = {}
        total = 0
        for blk in blocks:
            offsets[blk.element] = total
            total += len(blk.indices)
        gmat = sp.lil_matrix((total, total))
        grhs = np.zeros(total)
        for blk in blocks:
            o = offsets[blk.element]
            n = len(blk.indices)
            gmat[o:o + n, o:o + n] = blk.matrix
            grhs[o:o + n] = blk.rhs
        gsol = spla.spsolve(gmat.tocsc(), grhs)
        packed = np.concatenate([blk.coeffs for blk in blocks])
        scale = max(np.abs(gsol).max(), 1e-30)
        assert np.abs(gsol - packed).max() <= 1e-12 * scale

    def test_solve_blocks_trivial_cases(self):
        from hbplate.estimators import BubbleBlock
        blk = BubbleBlock(element=ElementId(0, 0, 0), indices=[(2, 2)],
                          matrix=np.array([[4.0]]), rhs=np.array([2.0]))
        solve_blocks([blk])
        assert blk.coeffs[0] == pytest.approx(0.5)
        blk2 = BubbleBlock(element=ElementId(0, 0, 0), indices=[(2, 2)],
                           matrix=np.array([[4.0]]), rhs=np.array([0.0]))
        solve_blocks([blk2])
        assert blk2.coeffs[0] == 0.0


class TestEta:
    def test_zero_coeffs_zero_eta(self):
        from hbplate.estimators import BubbleBlock
        blk = BubbleBlock(element=ElementId(0, 0, 0), indices=[(2, 2)],
                          matrix=np.array([[4.0]]), rhs=np.array([0.0]),
                          coeffs=np.array([0.0]))
        assert eta_elements([blk])[0].eta == 0.0

    def test_calibration_linearity(self):
        space = HierarchicalSpace.create(3, 3)
        prob = smooth_problem()
        u = solve_problem(space, prob)
        est3, tot3 = estimate(u, space, prob, calibration=3.0)
        est6, tot6 = estimate(u, space, prob, calibration=6.0)
        assert tot6 == pytest.approx(2.0 * tot3, rel=1e-14)
        for a, b in zip(est3, est6):
            assert b.eta == pytest.approx(2.0 * a.eta, rel=1e-13)

    def test_spline_exact_estimates_vanish(self):
        for p in (3, 4, 5):
            space = HierarchicalSpace.create(2, p)
            prob = spline_exact_problem()
            u = solve_problem(space, prob)
            system = assemble_system(space, IDENTITY, prob)
            energy = math.sqrt(float(u.coefficients @ (system.matrix @ u.coefficients)))
            estimates, _ = estimate(u, space, prob)
            assert max(e.eta for e in estimates) <= 1e-8 * energy


class TestEstimate:
    def test_processing_order_invariance(self):
        space = HierarchicalSpace.create(3, 3)
        space = space.refined([ElementId(0, 2, 2)], m=2)
        prob = smooth_problem()
        u = solve_problem(space, prob)
        estimates, _ = estimate(u, space, prob)
        bubbles = build_bubble_space(space.mesh, 3, natural_boundary_sides(prob))
        elems = list(reversed(space.mesh.active_elements()))
        blocks = solve_blocks(assemble_blocks(bubbles, u, space, IDENTITY, prob, elements=elems))
        reversed_etas = {b.element: e.eta for b, e in zip(blocks, eta_elements(blocks))}
        for est in estimates:
            assert est.eta == pytest.approx(reversed_etas[est.element], rel=1e-13)

    def test_uniform_refinement_reduces_total(self):
        prob = smooth_problem()
        totals = []
        for n0 in (4, 8):
            space = HierarchicalSpace.create(n0, 3)
            u = solve_problem(space, prob)
            _, tot = estimate(u, space, prob)
            totals.append(tot)
        assert totals[1] < totals[0]

    def test_smooth_uniform_slope_matches_error_rate(self):
        prob = smooth_problem()
        errs, totals, hs = [], [], []
        for n0 in (4, 8, 16):
            space = HierarchicalSpace.create(n0, 3)
            u = solve_problem(space, prob)
            _, tot = estimate(u, space, prob)
            errs.append(h2_seminorm_error(u, smooth_hessian, space, IDENTITY))
            totals.append(tot)
            hs.append(1.0 / n0)
        slope_err = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        slope_eta = np.polyfit(np.log(hs), np.log(totals), 1)[0]
        assert slope_err == pytest.approx(2.0, abs=0.2)
        assert slope_eta == pytest.approx(2.0, abs=0.25)


class TestResidualEstimator:
    def test_spline_exact_estimates_vanish(self):
        space = HierarchicalSpace.create(3, 3)
        prob = spline_exact_problem()
        u = solve_problem(space, prob)
        ests = residual_estimator(u, space, prob)
        assert max(e.eta for e in ests) <= 1e-8

    def test_smooth_uniform_slope(self):
        prob = smooth_problem()
        totals, hs = [], []
        for n0 in (4, 8, 16):
            space = HierarchicalSpace.create(n0, 3)
            u = solve_problem(space, prob)
            ests = residual_estimator(u, space, prob)
            totals.append(math.sqrt(sum(e.eta**2 for e in ests)))
            hs.append(1.0 / n0)
        slope = np.polyfit(np.log(hs), np.log(totals), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.3)

    def test_residual_effectivity_much_larger_than_bubble(self):
        prob = smooth_problem()
        space = HierarchicalSpace.create(8, 3)
        u = solve_problem(space, prob)
        err = h2_seminorm_error(u, smooth_hessian, space, IDENTITY)
        _, eta_bubble = estimate(u, space, prob)
        ests = residual_estimator(u, space, prob)
        eta_res = math.sqrt(sum(e.eta**2 for e in ests))
        theta_b = effectivity(eta_bubble, err).theta
        theta_r = effectivity(eta_res, err).theta
        assert theta_r / theta_b > 10.0

    def test_jump_terms_present_on_level_interfaces(self):
        # a refined patch creates interior edges between levels
        space = HierarchicalSpace.create(2, 3)
        space = space.refined([ElementId(0, 0, 0)], m=2)
        prob = smooth_problem()
        u = solve_problem(space, prob)
        ests = residual_estimator(u, space, prob)
        assert all(np.isfinite(e.eta) for e in ests)
        assert len(ests) == space.mesh.n_active


class TestEffectivity:
    def test_trivial_ratio(self):
        report = effectivity(2.0, 1.0)
        assert report.theta == pytest.approx(2.0)

    def test_zero_error_raises(self):
        with pytest.raises(ValueError):
            effectivity(1.0, 0.0)

    def test_bubble_effectivity_in_band_on_smooth_problem(self):
        prob = smooth_problem()
        for p in (3, 4):
            space = HierarchicalSpace.create(8, p)
            u = solve_problem(space, prob)
            err = h2_seminorm_error(u, smooth_hessian, space, IDENTITY)
            _, tot = estimate(u, space, prob)
            theta = effectivity(tot, err).theta
            assert 1.0 <= theta <= 10.0
