"""Continuous tensor-product Lagrange elements, DoF enumeration, constraints.

Degrees of freedom are enumerated per level view by identifying coinciding
node coordinates; because all cell geometry is dyadic and node computation is
canonical, shared nodes produce bitwise-identical coordinates and the
identification is exact.

Two kinds of affine constraints ``x_i = sum_j c_ij x_j + b_i`` are built
here: hanging-node constraints tying the refined side of a coarse/fine
interface to the coarse polynomial trace, and strong Dirichlet conditions on
the boundary of [-1, 1]^d.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi, roots_legendre

from .mesh import LevelView

__all__ = [
    "LagrangeElement",
    "QuadratureRule",
    "DofMap",
    "ConstraintSet",
    "distribute_dofs",
    "build_hanging_node_constraints",
    "build_dirichlet_constraints",
]



def lobatto_nodes(p: int) -> np.ndarray:
    """Gauss-Lobatto points on [0, 1] (endpoints included), degree p."""
    if p < 1:
        raise ValueError("degree must be >= 1")
    if p == 1:
        return np.array([0.0, 1.0])
    interior = roots_jacobi(p - 1, 1.0, 1.0)[0]
    nodes = np.concatenate([[-1.0], interior, [1.0]])
    nodes = 0.5 * (nodes + 1.0)
    # symmetrize and snap dyadic values so coinciding nodes compare exactly
    nodes = 0.5 * (nodes + 1.0 - nodes[::-1])
    if p % 2 == 0:
        nodes[p // 2] = 0.5
    nodes[0], nodes[-1] = 0.0, 1.0
    return nodes


class LagrangeElement:
    """Tensor-product Lagrange element of degree p on the unit cell.

    The 1D node set is {0, 1} for p=1 and Gauss-Lobatto points for p >= 2;
    shape functions are products of 1D nodal basis polynomials.
    """

    def __init__(self, p: int):
        self.p = p
        self.nodes = lobatto_nodes(p)

    @property
    def n_nodes_1d(self) -> int:
        return self.p + 1

    def eval_1d(self, x) -> np.ndarray:
        """Values of the 1D nodal basis at the points x, shape (m, p+1)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        nds = self.nodes
        n = len(nds)
        vals = np.ones((len(x), n))
        for i in range(n):
            for j in range(n):
                if j != i:
                    vals[:, i] *= (x - nds[j]) / (nds[i] - nds[j])
        return vals

    def eval_deriv_1d(self, x) -> np.ndarray:
        """Derivatives of the 1D nodal basis at the points x."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        nds = self.nodes
        n = len(nds)
        out = np.zeros((len(x), n))
        for i in range(n):
            for k in range(n):
                if k == i:
                    continue
                term = np.full(len(x), 1.0 / (nds[i] - nds[k]))
                for j in range(n):
                    if j != i and j != k:
                        term *= (x - nds[j]) / (nds[i] - nds[j])
                out[:, i] += term
        return out


class QuadratureRule:
    """1D Gauss-Legendre rule on [0, 1], tensorized on demand."""

    def __init__(self, n: int):
        pts, wts = roots_legendre(n)
        self.points = 0.5 * (pts + 1.0)
        self.weights = 0.5 * wts
        self.n = n

    def tensor(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        """Tensor points (n^d, d) and weights (n^d,), dimension 0 fastest."""
        pts1 = self.points
        w = self.weights
        lat = node_lattice(self.n - 1, d)
        points = pts1[lat]
        weights = np.prod(w[lat], axis=1)
        return points, weights


def node_lattice(p: int, d: int) -> np.ndarray:
    """Multi-indices (npc, d) of the tensor lattice; dimension 0 varies
    fastest, matching C-order reshape to (n, ..., n) with dim 0 last."""
    n = p + 1
    grids = np.meshgrid(*([np.arange(n)] * d), indexing="ij")
    lat = np.stack(grids[::-1], axis=-1).reshape(-1, d)
    return lat


class DofMap:
    """Global DoF enumeration of a level view for degree-p elements.

    Attributes
    ----------
    view : LevelView
    element : LagrangeElement
    n_dofs : int
    cell_dofs : (n_cells, (p+1)^d) int64
        Gather list per cell, local nodes in lattice order.
    node_coords : (n_dofs, d) float
        Physical coordinates of each global DoF.
    cell_sizes : (n_cells,) float
    """

    def __init__(self, view: LevelView, element, n_dofs, cell_dofs, node_coords):
        self.view = view
        self.element = element
        self.n_dofs = n_dofs
        self.cell_dofs = cell_dofs
        self.node_coords = node_coords
        mesh = view.mesh
        self.cell_sizes = mesh.cell_size(view.cells)
        self.cell_origins = mesh.cell_origin(view.cells)
        self._cell_row = None

    @property
    def p(self) -> int:
        return self.element.p

    @property
    def dim(self) -> int:
        return self.view.mesh.dim

    @property
    def n_cells(self) -> int:
        return len(self.view.cells)

    def cell_row(self, cell_id: int) -> int:
        """Row in cell_dofs of a mesh cell id."""
        if self._cell_row is None:
            self._cell_row = {int(c): i for i, c in enumerate(self.view.cells)}
        return self._cell_row[cell_id]

    def boundary_dofs(self) -> np.ndarray:
        """Global indices of DoFs on the boundary of [-1, 1]^d."""
        on = (np.abs(self.node_coords) == 1.0).any(axis=1)
        return np.nonzero(on)[0]


def distribute_dofs(view: LevelView, p: int) -> DofMap:
    """Enumerate global DoFs of a level view with continuity across cells.

    Identification is topological: two cell-local nodes are the same global
    DoF iff they sit at the same point *and* lie on the same geometric entity
    (per dimension: a shared endpoint, or the interior of the same dyadic
    interval).  A fine-side vertex coinciding with a coarse edge/face node
    across a hanging interface therefore stays a separate, constrained DoF.
    """
    mesh = view.mesh
    d = mesh.dim
    elem = LagrangeElement(p)
    lat = node_lattice(p, d)
    h = mesh.cell_size(view.cells)
    origin = mesh.cell_origin(view.cells)
    # physical node coordinates, (ncells, npc, d)
    frac = elem.nodes[lat]  # (npc, d)
    coords = origin[:, None, :] + h[:, None, None] * frac[None, :, :]
    flat = coords.reshape(-1, d)
    # Pack position and entity tag into one integer key per node.  With
    # Gauss-Lobatto nodes the only cross-level position coincidences are
    # fine endpoints meeting coarse nodes, so one interior/endpoint bit per
    # dimension separates entities; 20-bit dyadic quantization is exact for
    # every supported depth.
    quant = np.round((flat + 1.0) * float(1 << 18)).astype(np.int64)
    endpoint = (lat == 0) | (lat == p)  # (npc, d)
    tags = np.broadcast_to(
        (~endpoint).astype(np.int64)[None, :, :], coords.shape
    ).reshape(-1, d)
    keys = np.zeros(len(flat), dtype=np.int64)
    for k in range(d):
        keys = (keys << 21) | (quant[:, k] << 1) | tags[:, k]
    uniq, inverse = np.unique(keys, return_inverse=True)
    n_dofs = len(uniq)
    cell_dofs = inverse.reshape(len(view.cells), -1).astype(np.int64)
    node_coords = np.empty((n_dofs, d))
    node_coords[inverse] = flat
    return DofMap(view, elem, n_dofs, cell_dofs, node_coords)


class ConstraintSet:
    """Affine constraint lines x_i = sum_j c_ij x_j + b_i.

    Dirichlet lines have an empty entry list and carry the boundary value in
    b_i; hanging-node lines have b_i = 0 and coefficients summing to one.
    Constraining DoFs are never themselves constrained.
    """

    def __init__(self):
        self.lines: dict[int, tuple[np.ndarray, np.ndarray, float]] = {}

    def add(self, i: int, indices, coeffs, b: float = 0.0) -> None:
        self.lines[int(i)] = (
            np.asarray(indices, dtype=np.int64),
            np.asarray(coeffs, dtype=float),
            float(b),
        )

    def __len__(self) -> int:
        return len(self.lines)

    def __contains__(self, i) -> bool:
        return int(i) in self.lines

    @property
    def indices(self) -> np.ndarray:
        return np.fromiter(self.lines.keys(), dtype=np.int64, count=len(self.lines))

    def is_dirichlet(self, i: int) -> bool:
        return len(self.lines[int(i)][0]) == 0

    def validate(self) -> None:
        """Check the no-chain invariant.

        A constraining DoF must not itself carry a coefficient line; a
        reference to a Dirichlet line is fine (the value substitutes
        directly, so resolution still terminates in one pass).
        """
        for i, (idx, _, _) in self.lines.items():
            for j in idx:
                line = self.lines.get(int(j))
                if line is not None and len(line[0]) > 0:
                    raise ValueError(
                        f"constraint chain: DoF {j} constrains {i} but is "
                        "itself constrained (mesh not one-irregular?)"
                    )

    def merge(self, other: "ConstraintSet") -> "ConstraintSet":
        """Combine with another set; lines of ``other`` win on conflicts."""
        out = ConstraintSet()
        out.lines = dict(self.lines)
        out.lines.update(other.lines)
        return out

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        if self.lines:
            m[self.indices] = True
        return m

    def resolution_matrix(self, n: int) -> sp.csr_matrix:
        """Sparse C with C[i, :] = e_i for free DoFs, the constraint
        coefficients for hanging DoFs (entries at constrained columns
        dropped), and zero rows for Dirichlet DoFs.

        The homogeneous condensed operator is C^T A C plus identity on
        constrained rows; inhomogeneities are handled via ``lift_vector``.
        """
        mask = self.mask(n)
        free = np.nonzero(~mask)[0]
        rows = [free]
        cols = [free]
        vals = [np.ones(len(free))]
        for i, (idx, coef, _) in self.lines.items():
            if len(idx) == 0:
                continue
            keep = ~mask[idx]
            rows.append(np.full(int(keep.sum()), i, dtype=np.int64))
            cols.append(idx[keep])
            vals.append(coef[keep])
        C = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )
        return C

    def lift_vector(self, n: int) -> np.ndarray:
        """Vector satisfying all constraint lines, zero at free DoFs."""
        g = np.zeros(n)
        hanging = []
        for i, (idx, coef, b) in self.lines.items():
            if len(idx) == 0:
                g[i] = b
            else:
                hanging.append((i, idx, coef, b))
        for i, idx, coef, b in hanging:
            g[i] = float(coef @ g[idx]) + b
        return g

    def apply_values(self, x: np.ndarray) -> np.ndarray:
        """Overwrite constrained entries of x by resolving their lines
        (boundary values first, then interpolating lines)."""
        out = np.array(x, dtype=float, copy=True)
        hanging = []
        for i, (idx, coef, b) in self.lines.items():
            if len(idx) == 0:
                out[i] = b
            else:
                hanging.append((i, idx, coef, b))
        for i, idx, coef, b in hanging:
            out[i] = float(coef @ out[idx]) + b
        return out


def _face_lattice(p: int, d: int, axis: int, side: int) -> np.ndarray:
    """Local lattice indices of the face with fixed coordinate on ``axis``."""
    lat = node_lattice(p, d)
    return np.nonzero(lat[:, axis] == (p if side else 0))[0]


def _pack_cells(level: np.ndarray, coords: np.ndarray) -> np.ndarray:
    key = level.astype(np.int64)
    for k in range(coords.shape[1]):
        key = (key << 16) | coords[:, k]
    return key


def build_hanging_node_constraints(dofmap: DofMap) -> ConstraintSet:
    """Constrain fine-side DoFs on coarse/fine interfaces of the view.

    Every DoF of a refined cell lying on a face shared with a coarser cell is
    tied to the coarse side's shape-function trace; coefficients are tensor
    products of 1D coarse basis values at the fine node positions.  Raises
    if the view is not one-irregular.
    """
    view = dofmap.view
    mesh = view.mesh
    d = mesh.dim
    p = dofmap.p
    elem = dofmap.element
    cells = view.cells
    lev = mesh.level[cells]
    crd = mesh.coords[cells]

    keys = _pack_cells(lev, crd)
    order = np.argsort(keys)
    sorted_keys = keys[order]

    def find(level_arr, coord_arr):
        q = _pack_cells(level_arr, coord_arr)
        pos = np.searchsorted(sorted_keys, q)
        pos = np.clip(pos, 0, len(sorted_keys) - 1)
        hit = sorted_keys[pos] == q
        return hit, order[pos]

    # 1D coarse-basis values at fine node positions per child offset
    M = [elem.eval_1d((off + elem.nodes) * 0.5) for off in (0, 1)]
    # fine node positions landing on a coarse interval endpoint; a fine face
    # node mapping to an endpoint in every tangent dimension is a shared
    # coarse vertex DoF, not a constrained one
    hit1 = []
    for off in (0, 1):
        pos = (off + elem.nodes) * 0.5
        hit1.append((pos == 0.0) | (pos == 1.0))

    cons = ConstraintSet()
    tangents = {ax: [t for t in range(d) if t != ax] for ax in range(d)}
    face_loc = {(ax, s): _face_lattice(p, d, ax, s) for ax in range(d) for s in (0, 1)}
    lat = node_lattice(p, d)

    for ax in range(d):
        for side in (0, 1):
            step = np.zeros(d, dtype=np.int64)
            step[ax] = 1 if side else -1
            nb = crd + step
            inside = (nb[:, ax] >= 0) & (nb[:, ax] < (1 << lev))
            same_hit, _ = find(lev, nb)
            # candidates: no same-level neighbor, parent-level neighbor exists
            cand = inside & ~same_hit
            if not cand.any():
                continue
            coarse_hit, coarse_pos = find(lev[cand] - 1, nb[cand] >> 1)
            fine_rows = np.nonzero(cand)[0][coarse_hit]
            coarse_rows = coarse_pos[coarse_hit]
            if len(fine_rows) == 0:
                continue
            floc = face_loc[(ax, side)]
            cloc = face_loc[(ax, 1 - side)]
            tang = tangents[ax]
            # tangent lattice indices of face nodes, shape (nface, d-1)
            ftan = lat[floc][:, tang]
            ctan = lat[cloc][:, tang]
            for fr, cr in zip(fine_rows, coarse_rows):
                offs = [int(crd[fr, t] & 1) for t in tang]
                coef = np.ones((len(floc), len(cloc)))
                coincide = np.ones(len(floc), dtype=bool)
                for tdim, off in enumerate(offs):
                    coef *= M[off][ftan[:, tdim]][:, ctan[:, tdim]]
                    coincide &= hit1[off][ftan[:, tdim]]
                fdofs = dofmap.cell_dofs[fr, floc]
                cdofs = dofmap.cell_dofs[cr, cloc]
                for k in range(len(floc)):
                    if coincide[k]:
                        continue
                    gi = int(fdofs[k])
                    if gi in cons:
                        continue
                    row = coef[k]
                    keep = np.abs(row) > 1e-14
                    cons.add(gi, cdofs[keep], row[keep])
    cons.validate()
    return cons


def build_dirichlet_constraints(dofmap: DofMap, boundary_values) -> ConstraintSet:
    """Pin every boundary DoF to the given boundary value function.

    ``boundary_values`` maps an (n, d) coordinate array to n values; pass
    ``lambda x: np.zeros(len(x))`` for homogeneous conditions.
    """
    cons = ConstraintSet()
    bdofs = dofmap.boundary_dofs()
    if len(bdofs) == 0:
        return cons
    vals = np.asarray(boundary_values(dofmap.node_coords[bdofs]), dtype=float)
    empty_i = np.empty(0, dtype=np.int64)
    empty_c = np.empty(0)
    for i, v in zip(bdofs, vals):
        cons.add(int(i), empty_i, empty_c, float(v))
    return cons


def merge_constraints(hanging: ConstraintSet, dirichlet: ConstraintSet) -> ConstraintSet:
    """Merged set with Dirichlet lines overriding hanging lines."""
    merged = hanging.merge(dirichlet)
    return merged
