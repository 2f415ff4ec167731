"""Matrix-free Laplace operators on multigrid level views.

The operator never assembles a global matrix for its action: each
application gathers cell values (resolving constraints inline), interpolates
to Gauss points and differentiates by sum factorization (a sequence of 1D
contractions), scales by quadrature weights and the per-cell metric, and
integrates back.  Constrained rows and columns are condensed away, with unit
diagonal entries kept for solvability.

For local smoothing, level DoFs sitting on the interface toward coarser
cells (the refinement edge) are additionally condensed during smoothing; the
couplings across that interface are exposed separately through
``apply_edge_coupling``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .fem import ConstraintSet, DofMap, QuadratureRule, node_lattice

__all__ = ["LevelOperator", "EdgeDofClassification", "compute_edge_dofs"]


def _contract(U: np.ndarray, M: np.ndarray, axis: int) -> np.ndarray:
    """Contract tensor axis ``axis`` of U with M (in_index, out_index)."""
    out = np.tensordot(U, M, axes=([axis], [0]))
    return np.moveaxis(out, -1, axis)


class EdgeDofClassification:
    """Partition of a local-smoothing level's DoFs into interior and
    refinement-edge sets.

    Edge DoFs lie on faces of the level's cells that border a coarser region
    of the mesh; DoFs on the physical boundary stay in the interior set
    (they are handled by the Dirichlet constraints).
    """

    def __init__(self, dofmap: DofMap):
        self.dofmap = dofmap
        self.edge_mask = compute_edge_dofs(dofmap)

    @property
    def n_edge(self) -> int:
        return int(self.edge_mask.sum())


def compute_edge_dofs(dofmap: DofMap) -> np.ndarray:
    """Boolean mask of refinement-edge DoFs for a single-level cell set."""
    view = dofmap.view
    mesh = view.mesh
    d = mesh.dim
    p = dofmap.p
    cells = view.cells
    lev = mesh.level[cells]
    if len(cells) == 0:
        return np.zeros(dofmap.n_dofs, dtype=bool)
    if not (lev == lev[0]).all():
        raise ValueError("edge classification requires a single-level cell set")
    l = int(lev[0])
    crd = mesh.coords[cells]
    key = crd[:, 0].astype(np.int64)
    for k in range(1, d):
        key = (key << 16) | crd[:, k]
    sorted_keys = np.sort(key)

    lat = node_lattice(p, d)
    mask = np.zeros(dofmap.n_dofs, dtype=bool)
    for ax in range(d):
        for side in (0, 1):
            step = np.zeros(d, dtype=np.int64)
            step[ax] = 1 if side else -1
            nb = crd + step
            inside = (nb[:, ax] >= 0) & (nb[:, ax] < (1 << l))
            q = nb[:, 0].astype(np.int64)
            for k in range(1, d):
                q = (q << 16) | nb[:, k]
            pos = np.clip(np.searchsorted(sorted_keys, q), 0, len(sorted_keys) - 1)
            missing = inside & (sorted_keys[pos] != q)
            if not missing.any():
                continue
            floc = np.nonzero(lat[:, ax] == (p if side else 0))[0]
            mask[dofmap.cell_dofs[np.nonzero(missing)[0]][:, floc].ravel()] = True
    # physical boundary wins over the interface classification
    bd = np.zeros(dofmap.n_dofs, dtype=bool)
    bd[dofmap.boundary_dofs()] = True
    mask &= ~bd
    return mask


class LevelOperator:
    """Matrix-free weak Laplacian of one level, with condensed constraints.

    Parameters
    ----------
    dofmap : DofMap
    constraints : ConstraintSet
        Merged hanging-node and Dirichlet constraints of the level.
    edge_mask : bool array, optional
        Refinement-edge DoFs to condense additionally (local smoothing);
        the operator then represents the interior block of the level matrix.
    dtype : numpy dtype
        float64, or float32 for the reduced-precision V-cycle variant.
    """

    def __init__(self, dofmap, constraints, edge_mask=None, dtype=np.float64):
        self.dofmap = dofmap
        self.constraints = constraints
        self.dtype = np.dtype(dtype)
        n = dofmap.n_dofs
        d = dofmap.dim
        p = dofmap.p

        self.cons_mask = constraints.mask(n)
        if edge_mask is None:
            edge_mask = np.zeros(n, dtype=bool)
        self.edge_mask = edge_mask
        self.cond_mask = self.cons_mask | edge_mask

        elem = dofmap.element
        quad = QuadratureRule(p + 1)
        B = elem.eval_1d(quad.points)          # (nq, p+1)
        D = elem.eval_deriv_1d(quad.points)
        self._B = B.astype(self.dtype)
        self._Dhat = (D @ np.linalg.inv(B)).astype(self.dtype)  # collocation grad
        w1 = quad.weights
        wt = w1
        for _ in range(d - 1):
            wt = np.multiply.outer(wt, w1)
        self._wq = wt.astype(self.dtype)       # (nq, ..., nq)
        self.cell_scale = (dofmap.cell_sizes ** (d - 2)).astype(self.dtype)
        self._quad = quad

        self._gather = self._build_gather(self.cond_mask)
        self._scatter = sp.csr_matrix(self._gather.T)
        self._gather_noedge = None
        self._scatter_noedge = None
        self._touch = None
        self._Kref = None

    # -- setup helpers -----------------------------------------------------

    def _build_gather(self, cond_mask: np.ndarray) -> sp.csr_matrix:
        """Rows of the constraint-resolving gather C o G for all cells."""
        n = self.dofmap.n_dofs
        free = np.nonzero(~cond_mask)[0]
        rows = [free]
        cols = [free]
        vals = [np.ones(len(free))]
        for i, (idx, coef, _) in self.constraints.lines.items():
            # Dirichlet lines and edge-condensed DoFs become zero rows
            if len(idx) == 0 or self.edge_mask[i]:
                continue
            keep = ~cond_mask[idx]
            rows.append(np.full(int(keep.sum()), i, dtype=np.int64))
            cols.append(idx[keep])
            vals.append(coef[keep])
        C = sp.csr_matrix(
            (
                np.concatenate(vals).astype(self.dtype),
                (np.concatenate(rows), np.concatenate(cols)),
            ),
            shape=(n, n),
        )
        return sp.csr_matrix(C[self.dofmap.cell_dofs.ravel(), :])

    @property
    def n_dofs(self) -> int:
        return self.dofmap.n_dofs

    @property
    def shape(self):
        n = self.n_dofs
        return (n, n)

    # -- cell kernel ---------------------------------------------------------

    def _cell_kernel(self, U: np.ndarray, scale: np.ndarray) -> np.ndarray:
        """Sum-factorized action of the element stiffness on cell tensors.

        U has shape (ncells, nq, ..., nq); returns the same shape holding
        integral(grad u . grad v) against every test function.
        """
        d = self.dofmap.dim
        axes = range(1, d + 1)
        Bt = self._B.T
        V = U
        for ax in axes:
            V = _contract(V, Bt, ax)
        w = self._wq[None] * scale.reshape((-1,) + (1,) * d)
        DhatT = self._Dhat.T
        acc = None
        for ax in axes:
            G = _contract(V, DhatT, ax)
            G *= w
            G = _contract(G, self._Dhat, ax)
            acc = G if acc is None else acc + G
        for ax in axes:
            acc = _contract(acc, self._B, ax)
        return acc

    def _tensor_shape(self, ncells: int) -> tuple:
        n1 = self.dofmap.p + 1
        return (ncells,) + (n1,) * self.dofmap.dim

    _KERNEL_BLOCK = 2000  # cells per kernel call, keeps temporaries in cache

    def _blocked_kernel(self, U: np.ndarray, scale: np.ndarray) -> np.ndarray:
        bs = self._KERNEL_BLOCK
        if U.shape[0] <= bs:
            return self._cell_kernel(U, scale)
        out = np.empty_like(U)
        for s in range(0, U.shape[0], bs):
            out[s : s + bs] = self._cell_kernel(U[s : s + bs], scale[s : s + bs])
        return out

    # -- operator actions ------------------------------------------------------

    def apply(self, x: np.ndarray) -> np.ndarray:
        """v = A x with constraints condensed (unit diagonal on constrained)."""
        if len(x) != self.n_dofs:
            raise ValueError(f"expected vector of length {self.n_dofs}, got {len(x)}")
        x = np.asarray(x).astype(self.dtype, copy=False)
        U = (self._gather @ x).reshape(self._tensor_shape(self.dofmap.n_cells))
        W = self._blocked_kernel(U, self.cell_scale)
        v = self._scatter @ W.ravel()
        v[self.cond_mask] = x[self.cond_mask]
        return v

    def apply_raw(self, x: np.ndarray) -> np.ndarray:
        """Action of the unconstrained operator (plain gather/scatter)."""
        x = np.asarray(x).astype(self.dtype, copy=False)
        U = x[self.dofmap.cell_dofs].reshape(self._tensor_shape(self.dofmap.n_cells))
        W = self._blocked_kernel(U, self.cell_scale)
        return np.bincount(
            self.dofmap.cell_dofs.ravel(), weights=W.ravel().astype(float), minlength=self.n_dofs
        ).astype(self.dtype)

    def reference_element_matrix(self) -> np.ndarray:
        """Unit-scale element stiffness, reconstructed column by column by
        pushing basis vectors through the cell kernel."""
        if self._Kref is None:
            npc = (self.dofmap.p + 1) ** self.dofmap.dim
            I = np.eye(npc, dtype=self.dtype).reshape(self._tensor_shape(npc))
            K = self._cell_kernel(I, np.ones(npc, dtype=self.dtype))
            self._Kref = K.reshape(npc, npc).T
        return self._Kref

    def compute_diagonal(self) -> np.ndarray:
        """Diagonal of the condensed operator.

        Cells without constrained DoFs contribute plain element-matrix
        diagonals; cells touching constraints contribute the diagonal of the
        locally condensed element matrix.  Constrained entries are 1.
        """
        n = self.n_dofs
        npc = (self.dofmap.p + 1) ** self.dofmap.dim
        Kref = self.reference_element_matrix()
        kdiag = np.diag(Kref)
        d = np.zeros(n)

        # Cells with only Dirichlet/edge condensation keep plain element
        # diagonals: zero gather rows cannot produce cross terms, and the
        # constrained entries are overwritten at the end.  Only cells
        # referencing hanging DoFs need the condensed element diagonal.
        hang = np.zeros(n, dtype=bool)
        for i, (idx, _, _) in self.constraints.lines.items():
            if len(idx) and not self.edge_mask[i]:
                hang[i] = True
        touched = hang[self.dofmap.cell_dofs].any(axis=1)
        simple = np.nonzero(~touched)[0]
        if len(simple):
            contrib = np.outer(self.cell_scale[simple], kdiag)
            d += np.bincount(
                self.dofmap.cell_dofs[simple].ravel(),
                weights=contrib.ravel(),
                minlength=n,
            )
        Kref64 = Kref.astype(float)
        indptr = self._gather.indptr
        indices = self._gather.indices
        data = self._gather.data
        touched_rows = np.nonzero(touched)[0]
        for chunk in np.array_split(touched_rows, max(1, len(touched_rows) // 512)):
            if len(chunk) == 0:
                continue
            ncon = len(chunk)
            spans = [np.arange(indptr[r * npc], indptr[(r + 1) * npc]) for r in chunk]
            pos = np.concatenate(spans)
            ent_cell = np.repeat(np.arange(ncon), [len(s) for s in spans])
            row_ids = (chunk[:, None] * npc + np.arange(npc)[None, :]).ravel()
            rowcounts = indptr[row_ids + 1] - indptr[row_ids]
            ent_row = np.repeat(np.tile(np.arange(npc), ncon), rowcounts)
            ent_col = indices[pos]
            ent_val = data[pos].astype(float)
            # per-cell dense column slots for the distinct referenced DoFs
            order = np.lexsort((ent_col, ent_cell))
            sc, scol = ent_cell[order], ent_col[order]
            newgrp = np.ones(len(order), dtype=bool)
            newgrp[1:] = (sc[1:] != sc[:-1]) | (scol[1:] != scol[:-1])
            group = np.cumsum(newgrp) - 1
            cell_start_group = np.zeros(ncon, dtype=np.int64)
            first = np.ones(len(order), dtype=bool)
            first[1:] = sc[1:] != sc[:-1]
            cell_start_group[sc[first]] = group[first]
            slot_sorted = group - cell_start_group[sc]
            slot = np.empty(len(order), dtype=np.int64)
            slot[order] = slot_sorted
            mmax = int(slot.max()) + 1
            sub = np.zeros((ncon, npc, mmax))
            sub[ent_cell, ent_row, slot] = ent_val
            colmat = np.zeros((ncon, mmax), dtype=np.int64)
            validmat = np.zeros((ncon, mmax), dtype=bool)
            colmat[ent_cell, slot] = ent_col
            validmat[ent_cell, slot] = True
            Y = np.matmul(Kref64[None, :, :], sub)
            dloc = (sub * Y).sum(axis=1) * self.cell_scale[chunk, None].astype(float)
            d += np.bincount(
                colmat[validmat], weights=dloc[validmat], minlength=n
            )
        d[self.cond_mask] = 1.0
        return d.astype(self.dtype)

    def assemble_matrix(self) -> sp.csr_matrix:
        """Condensed level matrix, assembled cell by cell.

        Intended for coarse levels and oracle checks; matches ``apply`` on
        every unit vector.
        """
        n = self.n_dofs
        npc = (self.dofmap.p + 1) ** self.dofmap.dim
        Kref = self.reference_element_matrix().astype(float)
        rows_acc = []
        cols_acc = []
        vals_acc = []
        for r in range(self.dofmap.n_cells):
            rows = self._gather[r * npc : (r + 1) * npc, :]
            cols = np.unique(rows.indices)
            if len(cols) == 0:
                continue
            sub = rows[:, cols].toarray().astype(float)
            block = sub.T @ (Kref * float(self.cell_scale[r])) @ sub
            rr, cc = np.meshgrid(cols, cols, indexing="ij")
            rows_acc.append(rr.ravel())
            cols_acc.append(cc.ravel())
            vals_acc.append(block.ravel())
        idx = np.nonzero(self.cond_mask)[0]
        rows_acc.append(idx)
        cols_acc.append(idx)
        vals_acc.append(np.ones(len(idx)))
        A = sp.csr_matrix(
            (
                np.concatenate(vals_acc),
                (np.concatenate(rows_acc), np.concatenate(cols_acc)),
            ),
            shape=(n, n),
        )
        A.sum_duplicates()
        return A

    # -- local-smoothing edge couplings --------------------------------------

    def _edge_setup(self):
        if self._touch is None:
            touch = np.nonzero(self.edge_mask[self.dofmap.cell_dofs].any(axis=1))[0]
            self._touch = touch
            # gather resolving constraints but keeping edge DoFs live
            n = self.dofmap.n_dofs
            free = np.nonzero(~self.cons_mask)[0]
            rows = [free]
            cols = [free]
            vals = [np.ones(len(free))]
            for i, (idx, coef, _) in self.constraints.lines.items():
                if len(idx) == 0:
                    continue
                keep = ~self.cons_mask[idx]
                rows.append(np.full(int(keep.sum()), i, dtype=np.int64))
                cols.append(idx[keep])
                vals.append(coef[keep])
            C = sp.csr_matrix(
                (
                    np.concatenate(vals).astype(self.dtype),
                    (np.concatenate(rows), np.concatenate(cols)),
                ),
                shape=(n, n),
            )
            g = sp.csr_matrix(C[self.dofmap.cell_dofs[touch].ravel(), :])
            self._gather_noedge = g
            self._scatter_noedge = sp.csr_matrix(g.T)
        return self._touch

    def apply_edge_coupling(self, which: str, x: np.ndarray) -> np.ndarray:
        """Couplings between interior (S) and refinement-edge (E) DoFs.

        ``which="ES"`` returns -A_ES x_S on the edge DoFs (the interface part
        of the residual before restriction); ``which="SE"`` returns
        A_SE x_E on the interior DoFs (the right-hand-side update before
        postsmoothing).  Zero when the level has no refinement edge.
        """
        x = np.asarray(x).astype(self.dtype, copy=False)
        out = np.zeros(self.n_dofs, dtype=self.dtype)
        if not self.edge_mask.any():
            return out
        touch = self._edge_setup()
        xm = x.copy()
        if which == "ES":
            xm[self.edge_mask] = 0.0
        elif which == "SE":
            xm = np.where(self.edge_mask, xm, 0.0).astype(self.dtype)
        else:
            raise ValueError("which must be 'ES' or 'SE'")
        U = (self._gather_noedge @ xm).reshape(self._tensor_shape(len(touch)))
        W = self._blocked_kernel(U, self.cell_scale[touch])
        v = self._scatter_noedge @ W.ravel()
        if which == "ES":
            out[self.edge_mask] = -v[self.edge_mask]
        else:
            sel = ~self.edge_mask & ~self.cons_mask
            out[sel] = v[sel]
        return out

    # -- integration helpers ---------------------------------------------------

    def _rule(self, n_quad: int | None):
        """1D basis values at an n-point Gauss rule plus tensor weights."""
        d = self.dofmap.dim
        if n_quad is None or n_quad == self._quad.n:
            return self._quad, self._B.astype(float), self._wq.astype(float)
        quad = QuadratureRule(n_quad)
        B = self.dofmap.element.eval_1d(quad.points)
        w = quad.weights
        wt = w
        for _ in range(d - 1):
            wt = np.multiply.outer(wt, w)
        return quad, B, wt

    def quadrature_points(self, n_quad: int | None = None) -> np.ndarray:
        """Physical quadrature points, shape (ncells, nq^d, d)."""
        d = self.dofmap.dim
        quad, _, _ = self._rule(n_quad)
        qlat = node_lattice(quad.n - 1, d)
        frac = quad.points[qlat]
        return (
            self.dofmap.cell_origins[:, None, :]
            + self.dofmap.cell_sizes[:, None, None] * frac[None, :, :]
        )

    def integrate_rhs(self, f, n_quad: int | None = None) -> np.ndarray:
        """Raw load vector with entries integral(f phi_i), no constraints.

        ``n_quad`` raises the 1D Gauss order beyond the operator's p+1
        points, for forcing terms too rough for the consistent rule.
        """
        d = self.dofmap.dim
        quad, B, wq = self._rule(n_quad)
        pts = self.quadrature_points(n_quad)
        F = np.asarray(f(pts.reshape(-1, d)), dtype=float).reshape(pts.shape[:2])
        vol = self.dofmap.cell_sizes**d
        F = F * wq.ravel()[None, :] * vol[:, None]
        F = F.reshape((self.dofmap.n_cells,) + (quad.n,) * d)
        for ax in range(1, d + 1):
            F = _contract(F, B, ax)
        return np.bincount(
            self.dofmap.cell_dofs.ravel(), weights=F.ravel(), minlength=self.n_dofs
        )

    def evaluate_at_quadrature(self, u: np.ndarray, n_quad: int | None = None) -> np.ndarray:
        """Values of the finite-element field at the quadrature points."""
        d = self.dofmap.dim
        _, B, _ = self._rule(n_quad)
        U = u[self.dofmap.cell_dofs].reshape(self._tensor_shape(self.dofmap.n_cells))
        for ax in range(1, d + 1):
            U = _contract(U, B.T.astype(U.dtype), ax)
        return U.reshape(self.dofmap.n_cells, -1)

    def integrate_l2_error(self, u: np.ndarray, exact, n_quad: int | None = None) -> float:
        """L2 norm of (u_h - exact) by Gauss quadrature."""
        d = self.dofmap.dim
        _, _, wq = self._rule(n_quad)
        pts = self.quadrature_points(n_quad)
        uh = self.evaluate_at_quadrature(np.asarray(u, dtype=float), n_quad)
        ue = np.asarray(exact(pts.reshape(-1, d)), dtype=float).reshape(uh.shape)
        vol = self.dofmap.cell_sizes**d
        w = wq.ravel()
        return float(np.sqrt(np.sum((uh - ue) ** 2 * w[None, :] * vol[:, None])))
