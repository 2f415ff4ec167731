import numpy as np
import pytest
import scipy.sparse.linalg as spla

from treemg.fem import build_dirichlet_constraints, build_hanging_node_constraints
from treemg.fem import distribute_dofs, merge_constraints
from treemg.mesh import refine_octant, refine_shell, refine_uniform
from treemg.multigrid import (
    ChebyshevSmoother,
    DivergenceError,
    DirectCoarseSolver,
    MultigridOptions,
    build_hierarchy,
    chebyshev_smooth,
    estimate_max_eigenvalue,
    pcg_solve,
)
from treemg.operator import LevelOperator

from helpers import rng


def homogeneous(x):
    return np.zeros(len(x))


class DiagonalOperator:
    """Test stub: a diagonal matrix with the LevelOperator protocol."""

    def __init__(self, diag, cond_mask=None):
        self.d = np.asarray(diag, dtype=float)
        self.n_dofs = len(self.d)
        self.cond_mask = (
            np.zeros(self.n_dofs, dtype=bool) if cond_mask is None else cond_mask
        )

    def apply(self, x):
        out = self.d * x
        out[self.cond_mask] = x[self.cond_mask]
        return out


def solve_poisson(mesh, p, variant, rtol=1e-4, opts=None, f=None, max_iterations=100):
    opts = opts or MultigridOptions()
    h = build_hierarchy(mesh, p, variant, opts)
    dm = h.active_dofmap
    A = LevelOperator(dm, h.active_constraints)
    f = f or (lambda x: np.ones(len(x)))
    b_raw = A.integrate_rhs(f)
    b_hat = h.active_constraints.resolution_matrix(dm.n_dofs).T @ b_raw
    x, it = pcg_solve(A, b_hat, preconditioner=h.vcycle, rtol=rtol,
                      max_iterations=max_iterations)
    return x, it, A, b_hat, h


class TestChebyshev:
    def test_equal_spectrum_exact_in_one_step(self):
        lam = 3.7
        op = DiagonalOperator(np.full(6, lam))
        b = rng(0).standard_normal(6)
        x = np.zeros(6)
        # unit Jacobi, interval [lam, lam]
        chebyshev_smooth(op, np.ones(6), x, b, 1, (lam, lam))
        assert np.abs(x - b / lam).max() <= 1e-14

    def test_zero_residual_fixed_point(self):
        d = np.linspace(1.0, 5.0, 8)
        op = DiagonalOperator(d)
        r = rng(1)
        x0 = r.standard_normal(8)
        b = op.apply(x0)
        x = x0.copy()
        chebyshev_smooth(op, d, x, b, 3, (0.2, 1.2))
        assert np.abs(x - x0).max() <= 1e-13

    def test_k_zero_no_change(self):
        op = DiagonalOperator(np.ones(4))
        x = np.ones(4)
        out = chebyshev_smooth(op, np.ones(4), x, np.zeros(4), 0, (1, 1))
        assert np.array_equal(out, np.ones(4))

    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    def test_polynomial_error_bound_on_interval(self, k):
        # on a diagonal spectrum inside [lo, hi], the error reduction is
        # bounded by the Chebyshev polynomial bound 1/T_k(sigma)
        lo, hi = 0.1, 1.2
        lam = np.linspace(lo, hi, 50)
        op = DiagonalOperator(lam)
        x_exact = rng(2).standard_normal(50)
        b = lam * x_exact
        x = np.zeros(50)
        chebyshev_smooth(op, np.ones(50), x, b, k, (lo, hi))
        sigma = (hi + lo) / (hi - lo)
        bound = 1.0 / np.cosh(k * np.arccosh(sigma))
        ratio = np.abs(x - x_exact) / np.abs(x_exact)
        assert ratio.max() <= bound * (1 + 1e-10)

    def test_constrained_entries_untouched(self):
        mask = np.array([True, False, False])
        op = DiagonalOperator(np.array([1.0, 2.0, 3.0]), cond_mask=mask)
        x = np.array([7.0, 0.0, 0.0])
        b = np.array([0.0, 4.0, 9.0])
        chebyshev_smooth(op, np.array([1.0, 2.0, 3.0]), x, b, 3, (0.5, 1.2))
        assert x[0] == 7.0


class TestEigenvalueEstimate:
    def test_identity_operator(self):
        op = DiagonalOperator(np.ones(30))
        lam = estimate_max_eigenvalue(op, np.ones(30))
        assert lam == pytest.approx(1.0, rel=0.05)

    def test_known_two_by_two(self):
        op = DiagonalOperator(np.array([2.0, 5.0]))
        lam = estimate_max_eigenvalue(op, np.ones(2))
        assert lam == pytest.approx(5.0, rel=1e-10)

    def test_within_5_percent_on_oracle_mesh(self):
        m = refine_octant(2, 2)
        dm = distribute_dofs(m.active_view(), 2)
        cons = merge_constraints(
            build_hanging_node_constraints(dm),
            build_dirichlet_constraints(dm, homogeneous),
        )
        op = LevelOperator(dm, cons)
        diag = op.compute_diagonal()
        lam = estimate_max_eigenvalue(op, diag)
        A = op.assemble_matrix().toarray()
        D = np.diag(1.0 / np.sqrt(diag))
        true = np.linalg.eigvalsh(D @ A @ D)[-1]
        assert lam == pytest.approx(true, rel=0.05)

    def test_deterministic_across_runs(self):
        m = refine_octant(2, 2)
        dm = distribute_dofs(m.active_view(), 1)
        cons = build_dirichlet_constraints(dm, homogeneous)
        op = LevelOperator(dm, cons)
        diag = op.compute_diagonal()
        a = estimate_max_eigenvalue(op, diag)
        b = estimate_max_eigenvalue(op, diag)
        assert a == b


class TestCoarseSolve:
    def test_direct_solver_residual(self):
        m = refine_octant(2, 2)
        dm = distribute_dofs(m.active_view(), 2)
        cons = merge_constraints(
            build_hanging_node_constraints(dm),
            build_dirichlet_constraints(dm, homogeneous),
        )
        op = LevelOperator(dm, cons)
        solver = DirectCoarseSolver(op)
        b = rng(3).standard_normal(dm.n_dofs)
        x = solver.solve(b)
        r = b - op.apply(x)
        assert np.linalg.norm(r) <= 1e-12 * np.linalg.norm(b)

    def test_matches_cg(self):
        m = refine_uniform(2, 2)
        dm = distribute_dofs(m.active_view(), 1)
        cons = build_dirichlet_constraints(dm, homogeneous)
        op = LevelOperator(dm, cons)
        b = rng(4).standard_normal(dm.n_dofs)
        x = DirectCoarseSolver(op).solve(b)
        xcg, _ = pcg_solve(op, b, rtol=1e-12, max_iterations=500)
        assert np.abs(x - xcg).max() <= 1e-10 * np.abs(x).max()

    def test_fully_constrained_single_cell(self):
        dm = distribute_dofs(refine_uniform(0, 3).active_view(), 1)
        cons = build_dirichlet_constraints(dm, homogeneous)
        op = LevelOperator(dm, cons)
        b = np.zeros(8)
        assert np.abs(DirectCoarseSolver(op).solve(b)).max() == 0.0


class TestHierarchyShape:
    def test_uniform_ls_gc_same_level_shapes(self):
        m = refine_uniform(3, 2)
        hls = build_hierarchy(m, 1, "ls")
        hgc = build_hierarchy(m, 1, "gc")
        assert [l.n_dofs for l in hls.levels] == [l.n_dofs for l in hgc.levels]

    def test_pc_degree_chain(self):
        m = refine_octant(2, 2)
        h = build_hierarchy(m, 4, "pc")
        assert h.degrees == [1, 2, 4]

    def test_octant_level_counts_match(self):
        m = refine_octant(3, 2)
        assert build_hierarchy(m, 1, "ls").n_levels == 4
        assert build_hierarchy(m, 1, "gc").n_levels == 4

    def test_invalid_variant(self):
        with pytest.raises(ValueError):
            build_hierarchy(refine_uniform(1, 2), 1, "xx")


class TestVcycle:
    def test_single_level_is_exact_solve(self):
        m = refine_uniform(0, 2)
        h = build_hierarchy(m, 2, "gc")
        assert h.n_levels == 1
        dm = h.active_dofmap
        A = LevelOperator(dm, h.active_constraints)
        b = rng(5).standard_normal(dm.n_dofs)
        mask = h.active_constraints.mask(dm.n_dofs)
        b[mask] = 0.0
        x = h.vcycle(b)
        assert np.linalg.norm(b - A.apply(x)) <= 1e-12 * np.linalg.norm(b)

    def test_linearity(self):
        m = refine_octant(2, 2)
        h = build_hierarchy(m, 2, "gc")
        n = h.active_dofmap.n_dofs
        r = rng(6)
        b1, b2 = r.standard_normal((2, n))
        lhs = h.vcycle(2.0 * b1 - 3.0 * b2)
        rhs = 2.0 * h.vcycle(b1) - 3.0 * h.vcycle(b2)
        assert np.abs(lhs - rhs).max() <= 1e-11 * max(1.0, np.abs(rhs).max())

    def test_preconditioner_symmetry(self):
        for variant in ("ls", "gc"):
            m = refine_octant(2, 2)
            h = build_hierarchy(m, 1, variant)
            n = h.active_dofmap.n_dofs
            mask = h.active_constraints.mask(n)
            r = rng(7)
            x, y = r.standard_normal((2, n))
            x[mask] = 0.0
            y[mask] = 0.0
            a = h.vcycle(x) @ y
            b = x @ h.vcycle(y)
            assert abs(a - b) <= 1e-10 * max(abs(a), 1e-30)

    @pytest.mark.parametrize("p", [1, 2])
    def test_uniform_cube_ls_equals_gc(self, p):
        m = refine_uniform(2, 3)
        hls = build_hierarchy(m, p, "ls")
        hgc = build_hierarchy(m, p, "gc")
        n = hls.active_dofmap.n_dofs
        b = rng(8).standard_normal(n)
        b[hls.active_constraints.mask(n)] = 0.0
        xls = hls.vcycle(b)
        xgc = hgc.vcycle(b)
        assert np.abs(xls - xgc).max() <= 1e-10 * np.abs(xgc).max()


class TestCopyOps:
    def test_gc_round_trip_identity(self):
        m = refine_octant(2, 2)
        h = build_hierarchy(m, 1, "gc")
        v = rng(9).standard_normal(h.active_dofmap.n_dofs)
        h.copy_to_mg(v)
        h.levels[-1].x[:] = h.levels[-1].b
        assert np.abs(h.copy_from_mg() - v).max() <= 1e-14

    def test_uniform_ls_copy_equals_gc_copy(self):
        m = refine_uniform(2, 2)
        hls = build_hierarchy(m, 1, "ls")
        hgc = build_hierarchy(m, 1, "gc")
        n = hls.active_dofmap.n_dofs
        v = rng(10).standard_normal(n)
        v[hls.active_constraints.mask(n)] = 0.0  # cycle input precondition
        hls.copy_to_mg(v)
        hgc.copy_to_mg(v)
        for ll, lg in zip(hls.levels, hgc.levels):
            assert np.abs(ll.b - lg.b).max() <= 1e-14

    def test_ls_every_active_level_receives_data(self):
        m = refine_octant(3, 2)
        h = build_hierarchy(m, 1, "ls")
        v = np.ones(h.active_dofmap.n_dofs)
        h.copy_to_mg(v)
        active_levels = np.unique(m.level[m.active_cells()])
        for l in active_levels:
            assert np.abs(h.levels[int(l)].b).max() > 0.0

    def test_ls_ownership_is_a_partition(self):
        m = refine_octant(3, 2)
        h = build_hierarchy(m, 2, "ls")
        n = h.active_dofmap.n_dofs
        owned = np.zeros(n, dtype=int)
        for li, ai in h._ls_copy:
            owned[ai] += 1
        mask = h.active_constraints.mask(n)
        assert (owned[~mask] == 1).all()
        assert (owned[mask] == 0).all()


class TestInterpolateToMg:
    @pytest.mark.parametrize("variant", ["ls", "gc", "pc"])
    def test_constant_on_every_level(self, variant):
        m = refine_octant(2, 2)
        h = build_hierarchy(m, 2 if variant == "pc" else 1, variant)
        fields = h.interpolate_to_mg(np.ones(h.active_dofmap.n_dofs))
        for lev, f in zip(h.levels, fields):
            assert np.abs(f - 1.0).max() <= 1e-12

    @pytest.mark.parametrize("variant", ["ls", "gc"])
    def test_linear_field_reproduced(self, variant):
        m = refine_octant(2, 2)
        h = build_hierarchy(m, 1, variant)
        g = lambda x: x[:, 0] - 0.25 * x[:, 1]
        fields = h.interpolate_to_mg(g(h.active_dofmap.node_coords))
        for lev, f in zip(h.levels, fields):
            assert np.abs(f - g(lev.dofmap.node_coords)).max() <= 1e-12


class TestPcg:
    def test_identity_system_one_iteration(self):
        op = DiagonalOperator(np.ones(12))
        b = rng(11).standard_normal(12)
        x, it = pcg_solve(op, b, rtol=1e-4)
        assert it == 1
        assert np.abs(x - b).max() <= 1e-13

    def test_zero_rhs(self):
        op = DiagonalOperator(np.ones(5))
        x, it = pcg_solve(op, np.zeros(5))
        assert it == 0 and not x.any()

    def test_divergence_error(self):
        op = DiagonalOperator(np.linspace(1, 100, 64))
        b = rng(12).standard_normal(64)
        with pytest.raises(DivergenceError):
            pcg_solve(op, b, rtol=1e-14, max_iterations=2)

    def test_solution_matches_direct(self):
        m = refine_octant(3, 2)
        x, it, A, b_hat, h = solve_poisson(m, 2, "gc", rtol=1e-11)
        xd = spla.spsolve(A.assemble_matrix().tocsc(), b_hat)
        assert np.abs(x - xd).max() <= 1e-9 * np.abs(xd).max()


class TestIterationCounts:
    @pytest.mark.parametrize("p", [1, 2])
    def test_octant_ls_window(self, p):
        m = refine_octant(3, 3)
        _, it, _, _, _ = solve_poisson(m, p, "ls")
        assert 3 <= it <= 5

    def test_gc_not_more_than_ls(self):
        m = refine_octant(3, 3)
        _, it_ls, _, _, _ = solve_poisson(m, 1, "ls")
        _, it_gc, _, _, _ = solve_poisson(m, 1, "gc")
        assert it_gc <= it_ls <= it_gc + 1

    def test_cube_ls_equals_gc_iterations(self):
        m = refine_uniform(3, 3)
        _, it_ls, _, _, _ = solve_poisson(m, 1, "ls")
        _, it_gc, _, _, _ = solve_poisson(m, 1, "gc")
        assert it_ls == it_gc

    def test_smoother_degree_monotonicity(self):
        m = refine_octant(3, 2)
        _, it3, _, _, _ = solve_poisson(m, 2, "gc", opts=MultigridOptions(smoother_degree=3))
        _, it6, _, _, _ = solve_poisson(m, 2, "gc", opts=MultigridOptions(smoother_degree=6))
        assert it6 <= it3

    def test_mixed_precision_within_one_iteration(self):
        m = refine_octant(3, 2)
        _, itd, _, _, _ = solve_poisson(m, 2, "gc", opts=MultigridOptions(precision="double"))
        _, its, _, _, _ = solve_poisson(m, 2, "gc", opts=MultigridOptions(precision="single"))
        assert abs(itd - its) <= 1

    def test_pc_close_to_gc(self):
        m = refine_octant(3, 2)
        _, it_gc, _, _, _ = solve_poisson(m, 4, "gc")
        _, it_pc, _, _, _ = solve_poisson(m, 4, "pc")
        assert it_gc - 1 <= it_pc <= it_gc + 1
