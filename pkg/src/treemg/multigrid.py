"""Multigrid hierarchies and the preconditioned conjugate-gradient solver.

Three hierarchy variants share the same V-cycle skeleton: geometric local
smoothing ("ls", one level per refinement depth, smoothing restricted to the
cells of that depth), geometric global coarsening ("gc", one level per
truncation of the refinement tree, every level tiling the domain), and
polynomial coarsening ("pc", a bisection chain of degrees on the active mesh
with a geometric V-cycle as coarse-grid solver).

The cycle is used as a preconditioner for conjugate gradients: smoothers
start from zero initial guesses, making one cycle a fixed linear operator.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import eigh_tridiagonal

from .fem import (
    ConstraintSet,
    DofMap,
    build_dirichlet_constraints,
    build_hanging_node_constraints,
    distribute_dofs,
    merge_constraints,
)
from .mesh import TreeMesh
from .operator import EdgeDofClassification, LevelOperator, compute_edge_dofs
from .transfer import TwoLevelTransfer, build_geometric_transfer, build_polynomial_transfer

__all__ = [
    "MultigridOptions",
    "Hierarchy",
    "build_hierarchy",
    "ChebyshevSmoother",
    "chebyshev_smooth",
    "estimate_max_eigenvalue",
    "DirectCoarseSolver",
    "VcycleCoarseSolver",
    "pcg_solve",
    "DivergenceError",
]


class DivergenceError(RuntimeError):
    """Raised when the outer Krylov solver exceeds its iteration cap."""


@dataclass(frozen=True)
class MultigridOptions:
    """Solver configuration shared by all hierarchy variants."""

    smoother_degree: int = 3
    precision: str = "double"           # "double" | "single" for the V-cycle
    eig_iterations: int = 20
    eig_seed: int = 4711
    smoothing_low: float = 0.08         # lambda_lo = low * lambda_max_estimate
    smoothing_high: float = 1.2         # lambda_hi = high * lambda_max_estimate
    pc_coarse: str = "gc"               # geometric continuation below degree 1

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64


def estimate_max_eigenvalue(op, diag, iterations: int = 20, seed: int = 4711) -> float:
    """Largest eigenvalue of diag^-1 A, by a seeded Lanczos (power-type
    Krylov) iteration on the symmetrized operator.

    Deterministic for a fixed seed; on the constrained subspace the operator
    acts as the identity, so the start vector is zeroed there.
    """
    n = op.n_dofs
    mask = op.cond_mask
    nfree = int((~mask).sum())
    if nfree == 0:
        return 1.0
    dinv_sqrt = 1.0 / np.sqrt(np.asarray(diag, dtype=float))
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v[mask] = 0.0
    v /= np.linalg.norm(v)
    m = min(iterations, nfree)
    alphas, betas = [], []
    v_prev = np.zeros(n)
    beta = 0.0
    for _ in range(m):
        w = dinv_sqrt * np.asarray(op.apply((dinv_sqrt * v)), dtype=float)
        w[mask] = 0.0
        alpha = float(v @ w)
        w -= alpha * v + beta * v_prev
        alphas.append(alpha)
        beta = float(np.linalg.norm(w))
        betas.append(beta)
        if beta < 1e-12:
            break
        v_prev = v
        v = w / beta
    if len(alphas) == 1:
        return max(alphas[0], 1e-12)
    ev = eigh_tridiagonal(
        np.asarray(alphas), np.asarray(betas[: len(alphas) - 1]), eigvals_only=True
    )
    return float(ev[-1])


def chebyshev_smooth(op, diag, x, b, k, interval):
    """Degree-k Chebyshev acceleration of the Jacobi iteration on
    ``interval = (lambda_lo, lambda_hi)`` of diag^-1 A.

    Performs one operator application per smoothing step; constrained
    entries of x are never modified.  k = 0 returns x unchanged.
    """
    if k == 0:
        return x
    lo, hi = interval
    theta = 0.5 * (hi + lo)
    delta = 0.5 * (hi - lo)
    mask = op.cond_mask
    dtype = x.dtype
    diag = np.asarray(diag, dtype=dtype)
    rho = 0.0
    d = None
    x_is_zero = not np.any(x)
    for i in range(k):
        if i == 0 and x_is_zero:
            r = b.astype(dtype, copy=True)
        else:
            r = b - op.apply(x)
        r[mask] = 0.0
        z = r / diag
        if delta <= 1e-14 * abs(theta):
            d = z / theta
        elif i == 0:
            d = z / theta
            rho = delta / theta  # 1 / sigma_1
        else:
            rho_new = 1.0 / (2.0 * theta / delta - rho)
            d = (rho_new * rho) * d + (2.0 * rho_new / delta) * z
            rho = rho_new
        x += d
    return x


class ChebyshevSmoother:
    """Chebyshev iterations around a point-Jacobi method on one level."""

    def __init__(self, op, diag, degree, lam_max, low=0.08, high=1.2):
        self.op = op
        self.diag = diag
        self.degree = degree
        self.lam_max = lam_max
        self.interval = (low * lam_max, high * lam_max)

    def smooth(self, x, b):
        return chebyshev_smooth(self.op, self.diag, x, b, self.degree, self.interval)


class DirectCoarseSolver:
    """Sparse LU factorization of the assembled condensed level matrix."""

    def __init__(self, op: LevelOperator):
        self.op = op
        A = op.assemble_matrix().astype(float).tocsc()
        self._lu = spla.splu(A)

    def solve(self, b):
        x = self._lu.solve(np.asarray(b, dtype=float))
        return x.astype(b.dtype)


class VcycleCoarseSolver:
    """Terminate the recursion with one V-cycle of a nested geometric
    hierarchy (the coarse-grid solver of polynomial coarsening)."""

    def __init__(self, hierarchy: "Hierarchy"):
        self.hierarchy = hierarchy

    def solve(self, b):
        return self.hierarchy.vcycle(np.asarray(b, dtype=float)).astype(b.dtype)


class Level:
    """Per-level state: spaces, operator, smoother, scratch vectors."""

    def __init__(self, dofmap, constraints, op, transfer=None, edge=None):
        self.dofmap = dofmap
        self.constraints = constraints
        self.op = op
        self.transfer = transfer      # TwoLevelTransfer from the next coarser level
        self.edge = edge              # EdgeDofClassification (local smoothing)
        self.smoother = None
        n = dofmap.n_dofs
        self.b = np.zeros(n, dtype=op.dtype)
        self.x = np.zeros(n, dtype=op.dtype)

    @property
    def n_dofs(self):
        return self.dofmap.n_dofs


class Hierarchy:
    """A full multigrid hierarchy with scratch state for one solve at a time.

    Instances are not shareable across concurrent solves; build one
    hierarchy per thread of control.
    """

    def __init__(self, mesh, p, variant, options, levels, coarse_solver,
                 active_dofmap, active_constraints, ls_copy_maps=None,
                 ls_full_maps=None):
        self.mesh = mesh
        self.p = p
        self.variant = variant
        self.options = options
        self.levels = levels
        self.coarse_solver = coarse_solver
        self.active_dofmap = active_dofmap
        self.active_constraints = active_constraints
        self._ls_copy = ls_copy_maps    # per level: (level_idx, active_idx)
        self._ls_full = ls_full_maps
        self.dtype = options.dtype

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def degrees(self):
        return [lev.dofmap.p for lev in self.levels]

    # -- Algorithm 1: copies between the active mesh and the levels ---------

    def copy_to_mg(self, b_active):
        """Distribute an active-mesh vector to the level right-hand sides."""
        if self.variant in ("gc", "pc"):
            for lev in self.levels[:-1]:
                lev.b[:] = 0.0
            self.levels[-1].b[:] = np.asarray(b_active).astype(self.dtype)
        else:
            for lev, (li, ai) in zip(self.levels, self._ls_copy):
                lev.b[:] = 0.0
                lev.b[li] = np.asarray(b_active)[ai].astype(self.dtype)

    def copy_from_mg(self):
        """Assemble the active-mesh solution from the level solutions."""
        if self.variant in ("gc", "pc"):
            return self.levels[-1].x.astype(float)
        out = np.zeros(self.active_dofmap.n_dofs)
        for lev, (li, ai) in zip(self.levels, self._ls_copy):
            out[ai] = lev.x[li].astype(float)
        return out

    def interpolate_to_mg(self, active_field):
        """Restrict a nodal field to every level by element interpolation."""
        active_field = np.asarray(active_field, dtype=float)
        fields = [np.zeros(lev.n_dofs) for lev in self.levels]
        if self.variant in ("gc", "pc"):
            fields[-1][:] = active_field
            for l in range(self.n_levels - 1, 0, -1):
                self.levels[l].transfer.interpolate(fields[l - 1], fields[l])
        else:
            for l in range(self.n_levels - 1, -1, -1):
                if l < self.n_levels - 1:
                    self.levels[l + 1].transfer.interpolate(fields[l], fields[l + 1])
                li, ai = self._ls_full[l]
                fields[l][li] = active_field[ai]
        return fields

    # -- Algorithm 2: the V-cycle -------------------------------------------

    def vcycle(self, b_active):
        """One multigrid V-cycle applied to an active-mesh right-hand side."""
        self.copy_to_mg(b_active)
        self._cycle(self.n_levels - 1)
        return self.copy_from_mg()

    def _cycle(self, l):
        lev = self.levels[l]
        if l == 0:
            lev.x[:] = self.coarse_solver.solve(lev.b)
            lev.x[lev.op.cond_mask] = 0.0
            return
        ls_edge = self.variant == "ls" and lev.op.edge_mask.any()
        # presmoothing from a zero initial guess
        lev.x[:] = 0.0
        lev.smoother.smooth(lev.x, lev.b)
        # residual; for local smoothing the interface rows carry -A_ES x
        r = lev.b - lev.op.apply(lev.x)
        r[lev.op.cond_mask] = 0.0
        if ls_edge:
            r += lev.op.apply_edge_coupling("ES", lev.x)
        coarse = self.levels[l - 1]
        lev.transfer.restrict_and_add(coarse.b, r)
        coarse.b[coarse.op.cond_mask] = 0.0
        self._cycle(l - 1)
        lev.transfer.prolongate_and_add(lev.x, coarse.x)
        if ls_edge:
            lev.b -= lev.op.apply_edge_coupling("SE", lev.x)
        lev.smoother.smooth(lev.x, lev.b)


def _homogeneous(x):
    return np.zeros(len(x))


def _level_spaces(view, p, with_hanging=True):
    dm = distribute_dofs(view, p)
    hang = build_hanging_node_constraints(dm) if with_hanging else ConstraintSet()
    diri = build_dirichlet_constraints(dm, _homogeneous)
    return dm, merge_constraints(hang, diri), hang


def build_hierarchy(mesh: TreeMesh, p: int, variant: str,
                    options: MultigridOptions | None = None) -> Hierarchy:
    """Construct the level hierarchy of one multigrid variant.

    Local smoothing and global coarsening build one level per refinement
    depth; polynomial coarsening builds the bisection chain p, p//2, ..., 1
    on the active mesh and terminates with a geometric V-cycle.
    """
    options = options or MultigridOptions()
    variant = variant.lower()
    if variant not in ("ls", "gc", "pc"):
        raise ValueError(f"unknown multigrid variant {variant!r}")
    if p < 1:
        raise ValueError("polynomial degree must be >= 1")
    dtype = options.dtype
    L = mesh.max_level

    levels: list[Level] = []
    ls_copy = None
    ls_full = None

    if variant == "pc":
        if p < 2:
            raise ValueError("polynomial coarsening requires p >= 2")
        degrees = []
        q = p
        while q >= 1:
            degrees.append(q)
            q //= 2
        degrees = degrees[::-1]  # coarse to fine
        view = mesh.active_view()
        spaces = [_level_spaces(view, deg)[:2] for deg in degrees]
        for i, (dm, cons) in enumerate(spaces):
            op = LevelOperator(dm, cons, dtype=dtype)
            transfer = None
            if i > 0:
                dmc, consc = spaces[i - 1]
                transfer = build_polynomial_transfer(dmc, dm, consc, cons, dtype=dtype)
            levels.append(Level(dm, cons, op, transfer))
        nested = build_hierarchy(mesh, 1, options.pc_coarse, options)
        coarse_solver = VcycleCoarseSolver(nested)
        active_dm, active_cons = spaces[-1]
        active_hang = build_hanging_node_constraints(active_dm)
    else:
        spaces = []
        for l in range(L + 1):
            view = mesh.level_view(variant, l)
            spaces.append(_level_spaces(view, p, with_hanging=(variant == "gc")))
        for l, (dm, cons, _) in enumerate(spaces):
            edge = None
            edge_mask = None
            if variant == "ls":
                edge = EdgeDofClassification(dm)
                edge_mask = edge.edge_mask
            op = LevelOperator(dm, cons, edge_mask=edge_mask, dtype=dtype)
            transfer = None
            if l > 0:
                dmc, consc = spaces[l - 1][:2]
                transfer = build_geometric_transfer(dmc, dm, consc, cons, dtype=dtype)
            levels.append(Level(dm, cons, op, transfer, edge))
        coarse_solver = DirectCoarseSolver(levels[0].op)
        if variant == "gc":
            active_dm = levels[-1].dofmap
            active_cons = levels[-1].constraints
            active_hang = spaces[-1][2]
        else:
            active_view = mesh.active_view()
            active_dm, active_cons, active_hang = _level_spaces(active_view, p)
            ls_copy, ls_full = _ls_copy_maps(mesh, levels, active_dm, active_cons)

    # smoothers on all levels above the coarse solver
    for l in range(1, len(levels)):
        lev = levels[l]
        diag = lev.op.compute_diagonal()
        lam = estimate_max_eigenvalue(
            lev.op, diag, options.eig_iterations, options.eig_seed
        )
        lev.smoother = ChebyshevSmoother(
            lev.op, diag, options.smoother_degree, lam,
            options.smoothing_low, options.smoothing_high,
        )

    h = Hierarchy(
        mesh, p, variant, options, levels, coarse_solver,
        active_dm, active_cons, ls_copy, ls_full,
    )
    h.active_hanging = active_hang
    return h


def _ls_copy_maps(mesh, levels, active_dm, active_cons):
    """Ownership maps routing active-mesh values to local-smoothing levels.

    Every unconstrained active DoF is owned by the coarsest level whose
    active cells carry it; interface DoFs of a level (the refinement edge)
    therefore live on the next coarser level, which routes the interface
    right-hand side there ahead of the cycle.
    """
    active_rows = {int(c): i for i, c in enumerate(active_dm.view.cells)}
    cons_mask = active_cons.mask(active_dm.n_dofs)
    owned = np.zeros(active_dm.n_dofs, dtype=bool)
    copy_maps = []
    full_maps = []
    for lev in levels:
        cells = lev.dofmap.view.cells
        act = np.nonzero(mesh.first_child[cells] < 0)[0]
        if len(act) == 0:
            e = np.empty(0, dtype=np.int64)
            copy_maps.append((e, e))
            full_maps.append((e, e))
            continue
        rows_a = np.array([active_rows[int(c)] for c in cells[act]], dtype=np.int64)
        li = lev.dofmap.cell_dofs[act].ravel()
        ai = active_dm.cell_dofs[rows_a].ravel()
        full_maps.append((li, ai))
        edge_mask = lev.op.edge_mask
        cand = ~edge_mask[li] & ~cons_mask[ai] & ~owned[ai]
        li_c, ai_c = li[cand], ai[cand]
        _, first = np.unique(ai_c, return_index=True)
        li_c, ai_c = li_c[first], ai_c[first]
        owned[ai_c] = True
        copy_maps.append((li_c, ai_c))
    return copy_maps, full_maps


def pcg_solve(A, b, preconditioner=None, rtol: float = 1e-4,
              max_iterations: int = 100):
    """Preconditioned conjugate gradients on the condensed system.

    Stops when the l2 norm of the unpreconditioned residual has dropped by
    the factor ``rtol`` relative to the initial residual; raises
    DivergenceError past ``max_iterations``.  Returns (x, iterations).
    """
    apply_A = A.apply if hasattr(A, "apply") else A
    M = preconditioner if preconditioner is not None else lambda r: r.copy()
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    norm0 = np.linalg.norm(r)
    if norm0 == 0.0:
        return x, 0
    z = np.asarray(M(r), dtype=float)
    pvec = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iterations + 1):
        q = np.asarray(apply_A(pvec), dtype=float)
        alpha = rz / float(pvec @ q)
        x += alpha * pvec
        r -= alpha * q
        if np.linalg.norm(r) <= rtol * norm0:
            return x, it
        z = np.asarray(M(r), dtype=float)
        rz_new = float(r @ z)
        beta = rz_new / rz
        pvec = z + beta * pvec
        rz = rz_new
    raise DivergenceError(
        f"conjugate gradients did not reduce the residual by {rtol:g} "
        f"within {max_iterations} iterations"
    )
