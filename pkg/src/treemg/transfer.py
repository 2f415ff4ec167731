"""Two-level transfer operators between multigrid spaces.

A transfer pairs each fine cell with exactly one coarse cell through a
*category*: geometric coarsening pairs a parent with its group of children
("refined") or a cell with itself ("identity"); polynomial coarsening pairs
the same cell at two degrees ("degree").  All cells of a category share one
element prolongation matrix, stored through its 1D factor and applied by sum
factorization.

Prolongation follows the pipeline: gather coarse values with inline
constraint resolution, apply the category's element prolongation, scatter to
the fine vector, and weight by inverse valence with zero weight on
constrained fine DoFs.  Restriction is the exact transpose.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .fem import ConstraintSet, DofMap, LagrangeElement, QuadratureRule, node_lattice
from .operator import _contract

__all__ = [
    "element_prolongation_matrix",
    "TransferScheme",
    "TwoLevelTransfer",
    "build_geometric_transfer",
    "build_polynomial_transfer",
]


def _degree(element) -> int:
    return element.p if isinstance(element, LagrangeElement) else int(element)


def element_prolongation_matrix(coarse_element, fine_element, refined: bool) -> np.ndarray:
    """1D element prolongation by mass-matrix projection.

    Without refinement the matrix maps coarse nodal values to the fine node
    set of the same interval, shape (p_f+1, p_c+1); with refinement (equal
    degrees) it maps parent values to the union of the two children's nodes,
    shape (2p+1, p+1).  For these nested spaces the projection coincides
    with nodal interpolation; rows sum to one.
    """
    p_c = _degree(coarse_element)
    p_f = _degree(fine_element)
    if p_c > p_f:
        raise ValueError(f"non-nested prolongation request: p_c={p_c} > p_f={p_f}")
    if refined and p_c != p_f:
        raise ValueError("refinement prolongation requires equal degrees")
    fine = LagrangeElement(p_f)
    coarse = LagrangeElement(p_c)
    quad = QuadratureRule(p_f + 1)
    w = quad.weights
    if not refined:
        Bf = fine.eval_1d(quad.points)
        Bc = coarse.eval_1d(quad.points)
        M = Bf.T @ (w[:, None] * Bf)
        R = Bf.T @ (w[:, None] * Bc)
        return np.linalg.solve(M, R)
    p = p_f
    nu = 2 * p + 1
    M = np.zeros((nu, nu))
    R = np.zeros((nu, p + 1))
    Bf = fine.eval_1d(quad.points)
    for off in (0, 1):
        slots = off * p + np.arange(p + 1)
        Bc = coarse.eval_1d((off + quad.points) * 0.5)
        M[np.ix_(slots, slots)] += 0.5 * Bf.T @ (w[:, None] * Bf)
        R[slots, :] += 0.5 * Bf.T @ (w[:, None] * Bc)
    return np.linalg.solve(M, R)


def interpolation_matrix_1d(coarse_element, fine_element, refined: bool) -> np.ndarray:
    """1D nodal interpolation of a fine field onto the coarse node set."""
    p_c = _degree(coarse_element)
    p_f = _degree(fine_element)
    coarse = LagrangeElement(p_c)
    fine = LagrangeElement(p_f)
    if not refined:
        return fine.eval_1d(coarse.nodes)
    if p_c != p_f:
        raise ValueError("refinement interpolation requires equal degrees")
    p = p_f
    out = np.zeros((p + 1, 2 * p + 1))
    for j, x in enumerate(coarse.nodes):
        off = 1 if x >= 0.5 else 0
        out[j, off * p : off * p + p + 1] = fine.eval_1d(2.0 * x - off)[0]
    return out


class TransferScheme:
    """Per-category data: the 1D prolongation/interpolation factors plus
    gather/scatter index structures for all cells of the category."""

    def __init__(self, category, P1, I1, gather, scatter, coarse_dofs, dtype):
        self.category = category
        self.P1 = P1.astype(dtype)
        self.I1 = I1.astype(dtype)
        self.gather = gather          # ((ncells*npc_c), n_coarse) csr
        self.gather_t = sp.csr_matrix(gather.T)
        self.scatter = scatter        # (ncells, n_union^d) fine dof indices
        self.coarse_dofs = coarse_dofs  # (ncells, npc_c) plain coarse indices
        self.n_cells = scatter.shape[0]

    def dense_matrix(self, d: int) -> np.ndarray:
        """Tensorized element prolongation (n_union^d, npc_c)."""
        M = self.P1
        for _ in range(d - 1):
            M = np.kron(M, self.P1)
        return M


class TwoLevelTransfer:
    """Category-dispatched prolongation/restriction between two spaces."""

    def __init__(self, schemes, weights, n_coarse, n_fine, d, dtype=np.float64):
        self.schemes = schemes
        self.weights = weights.astype(dtype)
        self.n_coarse = n_coarse
        self.n_fine = n_fine
        self.dim = d
        self.dtype = np.dtype(dtype)

    @property
    def n_categories(self) -> int:
        return len(self.schemes)

    def _check(self, fine, coarse):
        if len(fine) != self.n_fine or len(coarse) != self.n_coarse:
            raise ValueError(
                f"size mismatch: got ({len(fine)}, {len(coarse)}), "
                f"expected ({self.n_fine}, {self.n_coarse})"
            )

    def prolongate_and_add(self, fine: np.ndarray, coarse: np.ndarray) -> np.ndarray:
        """fine += weights * sum over categories of scattered P_e C_e G_e coarse."""
        self._check(fine, coarse)
        coarse = np.asarray(coarse).astype(self.dtype, copy=False)
        acc = np.zeros(self.n_fine)
        d = self.dim
        for s in self.schemes:
            nc = s.n_cells
            if nc == 0:
                continue
            n1c = s.P1.shape[1]
            U = (s.gather @ coarse).reshape((nc,) + (n1c,) * d)
            M = s.P1.T
            for ax in range(1, d + 1):
                U = _contract(U, M, ax)
            acc += np.bincount(
                s.scatter.ravel(), weights=U.ravel().astype(float), minlength=self.n_fine
            )
        fine += (self.weights * acc.astype(self.dtype)).astype(fine.dtype)
        return fine

    def restrict_and_add(self, coarse: np.ndarray, fine: np.ndarray) -> np.ndarray:
        """coarse += transpose of the prolongation applied to fine."""
        self._check(fine, coarse)
        fine = np.asarray(fine).astype(self.dtype, copy=False)
        t = self.weights * fine
        d = self.dim
        for s in self.schemes:
            nc = s.n_cells
            if nc == 0:
                continue
            n1u = s.P1.shape[0]
            V = t[s.scatter].reshape((nc,) + (n1u,) * d)
            for ax in range(1, d + 1):
                V = _contract(V, s.P1, ax)
            coarse += (s.gather_t @ V.ravel()).astype(coarse.dtype)
        return coarse

    def interpolate(self, coarse: np.ndarray, fine: np.ndarray) -> np.ndarray:
        """Overwrite coarse nodal values by interpolating the fine field."""
        self._check(fine, coarse)
        fine = np.asarray(fine).astype(self.dtype, copy=False)
        d = self.dim
        for s in self.schemes:
            nc = s.n_cells
            if nc == 0:
                continue
            n1u = s.I1.shape[1]
            V = fine[s.scatter].reshape((nc,) + (n1u,) * d)
            M = s.I1.T
            for ax in range(1, d + 1):
                V = _contract(V, M, ax)
            coarse[s.coarse_dofs.ravel()] = V.ravel()
        return coarse


def _resolution_rows(cons: ConstraintSet, n: int, dofs: np.ndarray, dtype):
    """Gather rows that resolve hanging constraints on the coarse side.

    Unlike the operator's condensation, boundary values pass through
    unchanged: the transfer itself is value-neutral, and level corrections
    stay zero on constrained DoFs because the cycle zeroes them in the
    restricted right-hand sides.
    """
    mask = np.zeros(n, dtype=bool)
    hanging = [(i, line) for i, line in cons.lines.items() if len(line[0])]
    for i, _ in hanging:
        mask[i] = True
    keep = np.nonzero(~mask)[0]
    rows = [keep]
    cols = [keep]
    vals = [np.ones(len(keep))]
    for i, (idx, coef, _) in hanging:
        rows.append(np.full(len(idx), i, dtype=np.int64))
        cols.append(idx)
        vals.append(coef)
    C = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return sp.csr_matrix(C[dofs.ravel(), :]).astype(dtype)


def _weights(schemes, n_fine, fine_cons, dtype):
    count = np.zeros(n_fine)
    for s in schemes:
        if s.n_cells:
            count += np.bincount(s.scatter.ravel(), minlength=n_fine)
    w = np.zeros(n_fine)
    nz = count > 0
    w[nz] = 1.0 / count[nz]
    w[fine_cons.mask(n_fine)] = 0.0
    return w.astype(dtype)


def build_geometric_transfer(
    coarse_dofmap: DofMap,
    fine_dofmap: DofMap,
    coarse_constraints: ConstraintSet,
    fine_constraints: ConstraintSet | None = None,
    dtype=np.float64,
) -> TwoLevelTransfer:
    """Transfer between two geometric levels of the same mesh.

    Coarse cells present in the fine level form the identity category; coarse
    cells whose children are in the fine level form the refined category.
    With local-smoothing levels only the refined category occurs, since the
    unrefined coarse cells have no counterpart on the finer level.
    """
    if fine_constraints is None:
        fine_constraints = ConstraintSet()
    mesh = coarse_dofmap.view.mesh
    if mesh is not fine_dofmap.view.mesh:
        raise ValueError("transfer levels must view the same mesh")
    p = coarse_dofmap.p
    if p != fine_dofmap.p:
        raise ValueError("geometric transfer requires equal degrees")
    d = mesh.dim
    nchild = 1 << d

    fine_rows = {int(c): i for i, c in enumerate(fine_dofmap.view.cells)}
    ident_c, ident_f = [], []
    ref_c, ref_children = [], []
    for rc, cid in enumerate(coarse_dofmap.view.cells):
        cid = int(cid)
        if cid in fine_rows:
            ident_c.append(rc)
            ident_f.append(fine_rows[cid])
            continue
        fc = mesh.first_child[cid]
        if fc >= 0 and all(int(fc + k) in fine_rows for k in range(nchild)):
            ref_c.append(rc)
            ref_children.append([fine_rows[int(fc + k)] for k in range(nchild)])
        # otherwise the coarse cell has no footprint on the fine level (LS)

    schemes = []
    covered = np.zeros(len(fine_dofmap.view.cells), dtype=bool)
    if ref_c:
        ref_c = np.asarray(ref_c, dtype=np.int64)
        child_rows = np.asarray(ref_children, dtype=np.int64)
        # union-of-children lattice: per dim indices 0..2p; owner child and
        # its local index derived by index arithmetic, shared nodes once
        ulat = node_lattice(2 * p, d)
        off = (ulat >= p).astype(np.int64)  # shared index u==p lives in child 1
        loc = ulat - off * p
        child_idx = np.zeros(len(ulat), dtype=np.int64)
        local_flat = np.zeros(len(ulat), dtype=np.int64)
        for k in range(d):
            child_idx |= off[:, k] << k
            local_flat += loc[:, k] * (p + 1) ** k
        scatter = fine_dofmap.cell_dofs[child_rows[:, child_idx], local_flat[None, :]]
        covered[child_rows.ravel()] = True
        P1 = element_prolongation_matrix(p, p, refined=True)
        I1 = interpolation_matrix_1d(p, p, refined=True)
        cdofs = coarse_dofmap.cell_dofs[ref_c]
        gather = _resolution_rows(coarse_constraints, coarse_dofmap.n_dofs, cdofs, dtype)
        schemes.append(TransferScheme("refined", P1, I1, gather, scatter, cdofs, dtype))
    if ident_c:
        ident_c = np.asarray(ident_c, dtype=np.int64)
        ident_f = np.asarray(ident_f, dtype=np.int64)
        scatter = fine_dofmap.cell_dofs[ident_f]
        covered[ident_f] = True
        n1 = p + 1
        P1 = np.eye(n1)
        I1 = np.eye(n1)
        cdofs = coarse_dofmap.cell_dofs[ident_c]
        gather = _resolution_rows(coarse_constraints, coarse_dofmap.n_dofs, cdofs, dtype)
        schemes.append(TransferScheme("identity", P1, I1, gather, scatter, cdofs, dtype))
    if not covered.all():
        raise ValueError("inconsistent level pair: fine cells left uncovered")

    weights = _weights(schemes, fine_dofmap.n_dofs, fine_constraints, dtype)
    return TwoLevelTransfer(
        schemes, weights, coarse_dofmap.n_dofs, fine_dofmap.n_dofs, d, dtype
    )


def build_polynomial_transfer(
    coarse_dofmap: DofMap,
    fine_dofmap: DofMap,
    coarse_constraints: ConstraintSet,
    fine_constraints: ConstraintSet | None = None,
    dtype=np.float64,
) -> TwoLevelTransfer:
    """Transfer between two polynomial degrees on the same cells."""
    if fine_constraints is None:
        fine_constraints = ConstraintSet()
    if not np.array_equal(coarse_dofmap.view.cells, fine_dofmap.view.cells):
        raise ValueError("polynomial transfer requires identical cell sets")
    p_c, p_f = coarse_dofmap.p, fine_dofmap.p
    if p_c < 1:
        raise ValueError("no coarser polynomial level below degree 1")
    if p_c > p_f:
        raise ValueError(f"non-nested degrees: {p_c} > {p_f}")
    d = coarse_dofmap.dim
    P1 = element_prolongation_matrix(p_c, p_f, refined=False)
    I1 = interpolation_matrix_1d(p_c, p_f, refined=False)
    cdofs = coarse_dofmap.cell_dofs
    gather = _resolution_rows(coarse_constraints, coarse_dofmap.n_dofs, cdofs, dtype)
    scheme = TransferScheme("degree", P1, I1, gather, fine_dofmap.cell_dofs, cdofs, dtype)
    weights = _weights([scheme], fine_dofmap.n_dofs, fine_constraints, dtype)
    return TwoLevelTransfer(
        [scheme], weights, coarse_dofmap.n_dofs, fine_dofmap.n_dofs, d, dtype
    )
