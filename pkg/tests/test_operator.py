import numpy as np
import pytest

from treemg.fem import (
    ConstraintSet,
    build_dirichlet_constraints,
    build_hanging_node_constraints,
    distribute_dofs,
    merge_constraints,
)
from treemg.mesh import TreeMesh, refine_octant, refine_uniform
from treemg.operator import LevelOperator, compute_edge_dofs

from helpers import dense_assembled_operator, dense_element_stiffness, rng


def homogeneous(x):
    return np.zeros(len(x))


def spaces(mesh, p, view=None):
    view = view or mesh.active_view()
    dm = distribute_dofs(view, p)
    cons = merge_constraints(
        build_hanging_node_constraints(dm),
        build_dirichlet_constraints(dm, homogeneous),
    )
    return dm, cons


def small_two_level_mesh(d):
    m = TreeMesh(d)
    m.refine_cells([0])
    m.refine_cells([1])
    return m


# the oracle mesh collection: small meshes with and without hanging nodes
ORACLE_MESHES = [
    ("uniform-2d", lambda: refine_uniform(2, 2), 1),
    ("uniform-2d", lambda: refine_uniform(2, 2), 2),
    ("uniform-2d-p3", lambda: refine_uniform(1, 2), 3),
    ("octant-2d", lambda: refine_octant(2, 2), 1),
    ("octant-2d", lambda: refine_octant(2, 2), 2),
    ("octant-2d-l3", lambda: refine_octant(3, 2), 1),
    ("twolevel-2d", lambda: small_two_level_mesh(2), 3),
    ("uniform-3d", lambda: refine_uniform(1, 3), 2),
    ("octant-3d", lambda: refine_octant(2, 3), 1),
    ("octant-3d", lambda: refine_octant(2, 3), 2),
    ("twolevel-3d", lambda: small_two_level_mesh(3), 1),
    ("uniform-3d-p3", lambda: refine_uniform(1, 3), 3),
]


class TestApplyOracle:
    @pytest.mark.parametrize("name,gen,p", ORACLE_MESHES)
    def test_apply_matches_dense_assembly(self, name, gen, p):
        mesh = gen()
        dm, cons = spaces(mesh, p)
        assert dm.n_dofs <= 500
        op = LevelOperator(dm, cons)
        Acond, _, _ = dense_assembled_operator(dm, cons)
        r = rng(42)
        for _ in range(20):
            x = r.standard_normal(dm.n_dofs)
            v = op.apply(x)
            ref = Acond @ x
            scale = max(np.abs(ref).max(), 1e-30)
            assert np.abs(v - ref).max() <= 1e-12 * scale

    @pytest.mark.parametrize("name,gen,p", ORACLE_MESHES[:6])
    def test_diagonal_matches_dense_assembly(self, name, gen, p):
        mesh = gen()
        dm, cons = spaces(mesh, p)
        op = LevelOperator(dm, cons)
        d = op.compute_diagonal()
        ref = dense_assembled_operator(dm, cons)[0].diagonal()
        assert np.abs(d - ref).max() <= 1e-12 * np.abs(ref).max()

    def test_single_precision_relaxed_tolerance(self):
        mesh = refine_octant(2, 2)
        dm, cons = spaces(mesh, 2)
        op = LevelOperator(dm, cons, dtype=np.float32)
        Acond, _, _ = dense_assembled_operator(dm, cons)
        r = rng(3)
        x = r.standard_normal(dm.n_dofs)
        v = np.asarray(op.apply(x), dtype=float)
        ref = Acond @ x
        assert np.abs(v - ref).max() <= 1e-5 * np.abs(ref).max()
        assert op.apply(x).dtype == np.float32


class TestOperatorProperties:
    def test_constants_annihilated_inside(self):
        mesh = refine_octant(2, 2)
        dm, _ = spaces(mesh, 1)
        # no constraints at all: pure Neumann stiffness kills constants
        op = LevelOperator(dm, ConstraintSet())
        v = op.apply(np.ones(dm.n_dofs))
        assert np.abs(v).max() <= 1e-13

    def test_linearity(self):
        mesh = refine_octant(2, 3)
        dm, cons = spaces(mesh, 2)
        op = LevelOperator(dm, cons)
        r = rng(0)
        x, y = r.standard_normal((2, dm.n_dofs))
        lhs = op.apply(2.5 * x - 1.5 * y)
        rhs = 2.5 * op.apply(x) - 1.5 * op.apply(y)
        assert np.abs(lhs - rhs).max() <= 1e-12 * np.abs(rhs).max()

    def test_symmetry_on_unconstrained(self):
        mesh = refine_octant(3, 2)
        dm, cons = spaces(mesh, 2)
        op = LevelOperator(dm, cons)
        r = rng(1)
        mask = cons.mask(dm.n_dofs)
        for _ in range(5):
            x, y = r.standard_normal((2, dm.n_dofs))
            x[mask] = 0.0
            y[mask] = 0.0
            a = op.apply(x) @ y
            b = x @ op.apply(y)
            assert abs(a - b) <= 1e-12 * np.linalg.norm(x) * np.linalg.norm(y)

    def test_positive_semidefinite(self):
        mesh = refine_octant(2, 3)
        dm, cons = spaces(mesh, 1)
        op = LevelOperator(dm, cons)
        r = rng(2)
        for _ in range(10):
            x = r.standard_normal(dm.n_dofs)
            assert op.apply(x) @ x >= -1e-12 * (x @ x)


class TestAssembly:
    def test_bilinear_element_matrix(self):
        # the root cell (h=2): in 2D the stiffness is size independent
        dm, _ = spaces(refine_uniform(0, 2), 1)
        op = LevelOperator(dm, ConstraintSet())
        K = op.assemble_matrix().toarray()
        ref = np.array(
            [
                [2 / 3, -1 / 6, -1 / 6, -1 / 3],
                [-1 / 6, 2 / 3, -1 / 3, -1 / 6],
                [-1 / 6, -1 / 3, 2 / 3, -1 / 6],
                [-1 / 3, -1 / 6, -1 / 6, 2 / 3],
            ]
        )
        assert np.abs(K - ref).max() <= 1e-14
        assert np.abs(np.diag(K) - 2 / 3).max() <= 1e-14

    def test_dense_element_reference_agrees(self):
        for d, p, h in [(2, 1, 2.0), (2, 2, 0.5), (3, 1, 1.0), (3, 2, 0.25)]:
            dm, _ = spaces(refine_uniform(0, d), p)
            op = LevelOperator(dm, ConstraintSet())
            K = op.reference_element_matrix() * h ** (d - 2)
            ref = dense_element_stiffness(p, d, h)
            assert np.abs(K - ref).max() <= 1e-12 * np.abs(ref).max()

    def test_columns_equal_apply_on_unit_vectors(self):
        mesh = small_two_level_mesh(2)
        dm, cons = spaces(mesh, 2)
        op = LevelOperator(dm, cons)
        A = op.assemble_matrix()
        for j in range(dm.n_dofs):
            e = np.zeros(dm.n_dofs)
            e[j] = 1.0
            col = np.asarray(A[:, [j]].todense()).ravel()
            assert np.abs(op.apply(e) - col).max() <= 1e-13

    def test_matrix_symmetric(self):
        mesh = refine_octant(2, 3)
        dm, cons = spaces(mesh, 1)
        A = LevelOperator(dm, cons).assemble_matrix()
        assert abs(A - A.T).max() <= 1e-13


class TestEdgeClassification:
    def test_tiling_level_has_empty_edge(self):
        m = refine_uniform(2, 2)
        for l in range(3):
            dm = distribute_dofs(m.level_view("ls", l), 1)
            assert not compute_edge_dofs(dm).any()

    def test_octant_fine_level_edge(self):
        m = refine_octant(2, 2)
        dm = distribute_dofs(m.level_view("ls", 2), 1)
        mask = compute_edge_dofs(dm)
        # the level-2 patch is the refined quadrant; its interface toward
        # the level-1 cells carries the edge DoFs, the domain boundary not
        assert mask.any()
        for i in np.nonzero(mask)[0]:
            assert not (np.abs(dm.node_coords[i]) == 1.0).any()

    def test_edge_plus_interior_partition(self):
        m = refine_octant(3, 2)
        dm = distribute_dofs(m.level_view("ls", 2), 2)
        mask = compute_edge_dofs(dm)
        assert mask.dtype == bool and len(mask) == dm.n_dofs


class TestEdgeCoupling:
    @pytest.mark.parametrize("d,p", [(2, 1), (2, 2), (3, 1)])
    def test_blocks_match_dense_assembly(self, d, p):
        mesh = refine_octant(2, d)
        l = mesh.max_level
        view = mesh.level_view("ls", l)
        dm = distribute_dofs(view, p)
        cons = build_dirichlet_constraints(dm, homogeneous)
        edge = compute_edge_dofs(dm)
        assert edge.any()
        op = LevelOperator(dm, cons, edge_mask=edge)
        # dense level matrix with only Dirichlet condensation
        Afull, _, _ = dense_assembled_operator(dm, cons)
        Afull = Afull.toarray()
        r = rng(5)
        x = r.standard_normal(dm.n_dofs)
        free = ~cons.mask(dm.n_dofs)
        S = free & ~edge
        E = free & edge
        # ES: -A_ES x_S at edge rows
        xs = np.where(S, x, 0.0)
        ref = np.zeros(dm.n_dofs)
        ref[E] = -(Afull @ xs)[E]
        got = op.apply_edge_coupling("ES", x)
        assert np.abs(got - ref).max() <= 1e-12 * max(np.abs(ref).max(), 1)
        # SE: A_SE x_E at interior rows
        xe = np.where(E, x, 0.0)
        ref = np.zeros(dm.n_dofs)
        ref[S] = (Afull @ xe)[S]
        got = op.apply_edge_coupling("SE", x)
        assert np.abs(got - ref).max() <= 1e-12 * max(np.abs(ref).max(), 1)

    def test_zero_on_tiling_level(self):
        m = refine_uniform(2, 2)
        dm = distribute_dofs(m.level_view("ls", 2), 1)
        cons = build_dirichlet_constraints(dm, homogeneous)
        op = LevelOperator(dm, cons, edge_mask=compute_edge_dofs(dm))
        x = rng(0).standard_normal(dm.n_dofs)
        assert not op.apply_edge_coupling("ES", x).any()
        assert not op.apply_edge_coupling("SE", x).any()

    def test_zero_input_zero_output(self):
        mesh = refine_octant(2, 2)
        dm = distribute_dofs(mesh.level_view("ls", 2), 1)
        cons = build_dirichlet_constraints(dm, homogeneous)
        op = LevelOperator(dm, cons, edge_mask=compute_edge_dofs(dm))
        assert not op.apply_edge_coupling("ES", np.zeros(dm.n_dofs)).any()


class TestRhsAndErrors:
    def test_rhs_constant_function(self):
        # integral of phi_i over the domain sums to the domain volume
        dm, _ = spaces(refine_uniform(2, 2), 2)
        op = LevelOperator(dm, ConstraintSet())
        b = op.integrate_rhs(lambda x: np.ones(len(x)))
        assert b.sum() == pytest.approx(4.0, rel=1e-12)

    def test_l2_error_of_interpolant(self):
        dm, _ = spaces(refine_uniform(2, 2), 2)
        op = LevelOperator(dm, ConstraintSet())
        f = lambda x: x[:, 0] ** 2 + 0.5 * x[:, 1]
        u = f(dm.node_coords)
        assert op.integrate_l2_error(u, f) <= 1e-13

    def test_size_mismatch_raises(self):
        dm, cons = spaces(refine_uniform(1, 2), 1)
        op = LevelOperator(dm, cons)
        with pytest.raises(ValueError):
            op.apply(np.zeros(dm.n_dofs + 1))
