"""Adaptive quad/octree meshes over the cube [-1, 1]^d.

A mesh is a single refinement tree rooted at the cell [-1, 1]^d.  Cells are
squares (d=2) or cubes (d=3); refining a cell produces its 2^d children in
Morton (z-order) child ordering.  The leaves of the tree are the *active*
cells on which a PDE is discretized.  All refinement utilities in this module
maintain one-irregularity (2:1 balance): two active cells sharing a vertex
differ by at most one refinement level.

Multigrid level views are derived from the same tree:

* ``"ls"`` (local smoothing): the cells at exactly tree depth ``l``,
* ``"gc"`` (global coarsening): the leaves of the tree truncated at depth
  ``l``, which tile the whole domain for every ``l``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import product

import numpy as np

__all__ = [
    "TreeMesh",
    "LevelView",
    "refine_uniform",
    "refine_octant",
    "refine_shell",
    "balance_2to1",
    "mesh_statistics",
]


def _morton_interleave(coords: np.ndarray, nbits: int) -> np.ndarray:
    """Interleave the bits of integer coordinates (column 0 fastest)."""
    coords = np.asarray(coords, dtype=np.int64)
    d = coords.shape[1]
    out = np.zeros(len(coords), dtype=np.int64)
    for bit in range(nbits):
        for dim in range(d):
            out |= ((coords[:, dim] >> bit) & 1) << (bit * d + dim)
    return out


class TreeMesh:
    """Forest-of-one-tree adaptive mesh on [-1, 1]^d, d in {2, 3}.

    Cells are identified by integer ids in creation order.  Each cell stores
    its tree depth (``level``), integer coordinates on its level (a cell at
    level l with coordinates c spans ``[-1 + c*h, -1 + (c+1)*h]`` per
    dimension with ``h = 2^(1-l)``), its parent, its child index within the
    parent, and the id of its first child if refined.

    Meshes are mutable while being built (``refine_cells``) and should be
    treated as immutable afterwards; all solver components assume a frozen
    tree.
    """

    def __init__(self, dim: int):
        if dim not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {dim}")
        self.dim = dim
        self._levels = [0]
        self._coords = [(0,) * dim]
        self._parent = [-1]
        self._child_index = [0]
        self._first_child = [-1]
        self._arrays = None

    # -- construction -----------------------------------------------------

    def refine_cells(self, ids) -> None:
        """Refine the given active cells, creating 2^d children each."""
        d = self.dim
        nchild = 1 << d
        offsets = [tuple((k >> j) & 1 for j in range(d)) for k in range(nchild)]
        for cid in np.atleast_1d(np.asarray(ids, dtype=np.int64)):
            cid = int(cid)
            if self._first_child[cid] >= 0:
                raise ValueError(f"cell {cid} is already refined")
            self._first_child[cid] = len(self._levels)
            lvl = self._levels[cid] + 1
            base = tuple(2 * c for c in self._coords[cid])
            for k, off in enumerate(offsets):
                self._levels.append(lvl)
                self._coords.append(tuple(b + o for b, o in zip(base, off)))
                self._parent.append(cid)
                self._child_index.append(k)
                self._first_child.append(-1)
        self._arrays = None

    def copy(self) -> "TreeMesh":
        other = TreeMesh(self.dim)
        other._levels = list(self._levels)
        other._coords = list(self._coords)
        other._parent = list(self._parent)
        other._child_index = list(self._child_index)
        other._first_child = list(self._first_child)
        return other

    # -- cached array views -----------------------------------------------

    def _data(self):
        if self._arrays is None:
            self._arrays = {
                "level": np.asarray(self._levels, dtype=np.int64),
                "coords": np.asarray(self._coords, dtype=np.int64),
                "parent": np.asarray(self._parent, dtype=np.int64),
                "child_index": np.asarray(self._child_index, dtype=np.int64),
                "first_child": np.asarray(self._first_child, dtype=np.int64),
            }
        return self._arrays

    @property
    def n_cells(self) -> int:
        return len(self._levels)

    @property
    def level(self) -> np.ndarray:
        return self._data()["level"]

    @property
    def coords(self) -> np.ndarray:
        return self._data()["coords"]

    @property
    def parent(self) -> np.ndarray:
        return self._data()["parent"]

    @property
    def child_index(self) -> np.ndarray:
        return self._data()["child_index"]

    @property
    def first_child(self) -> np.ndarray:
        return self._data()["first_child"]

    @property
    def max_level(self) -> int:
        return int(self.level.max())

    def children(self, cid: int) -> np.ndarray:
        fc = self._first_child[cid]
        if fc < 0:
            return np.empty(0, dtype=np.int64)
        return np.arange(fc, fc + (1 << self.dim), dtype=np.int64)

    # -- geometry ----------------------------------------------------------

    def cell_size(self, ids) -> np.ndarray:
        """Edge length of the given cells."""
        return 2.0 ** (1.0 - self.level[ids])

    def cell_origin(self, ids) -> np.ndarray:
        """Lower-left corner of the given cells."""
        ids = np.asarray(ids)
        h = self.cell_size(ids)
        return -1.0 + self.coords[ids] * h[..., None]

    def cell_center(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        h = self.cell_size(ids)
        return self.cell_origin(ids) + 0.5 * h[..., None]

    def morton(self, ids) -> np.ndarray:
        """Morton index of each cell on its own level."""
        ids = np.asarray(ids)
        nbits = self.max_level + 1
        return _morton_interleave(np.atleast_2d(self.coords[ids]), nbits)

    def _sfc_key(self, ids) -> np.ndarray:
        """Morton index padded to a common finest level; orders any cell set
        along the depth-first space-filling curve."""
        ids = np.asarray(ids, dtype=np.int64)
        maxl = self.max_level
        m = self.morton(ids)
        return m << (self.dim * (maxl - self.level[ids]))

    # -- views ---------------------------------------------------------------

    def active_cells(self) -> np.ndarray:
        """Ids of the leaf cells, in space-filling-curve order."""
        ids = np.nonzero(self.first_child < 0)[0]
        return ids[np.argsort(self._sfc_key(ids))]

    def level_cells(self, variant: str, l: int) -> np.ndarray:
        """Cells of one multigrid level, in space-filling-curve order.

        ``variant="ls"`` returns the cells at exactly depth ``l``;
        ``variant="gc"`` returns the leaves of the tree truncated at depth
        ``l`` (the active mesh recursively coarsened ``max_level - l``
        times).
        """
        if not 0 <= l <= self.max_level:
            raise ValueError(f"level {l} outside [0, {self.max_level}]")
        variant = variant.lower()
        if variant == "ls":
            ids = np.nonzero(self.level == l)[0]
        elif variant == "gc":
            lev = self.level
            leaf = self.first_child < 0
            ids = np.nonzero((lev == l) | (leaf & (lev < l)))[0]
        else:
            raise ValueError(f"unknown level variant {variant!r}")
        return ids[np.argsort(self._sfc_key(ids))]

    def level_view(self, variant: str, l: int) -> "LevelView":
        return LevelView(self, variant, l, self.level_cells(variant, l))

    def active_view(self) -> "LevelView":
        L = self.max_level
        return LevelView(self, "gc", L, self.level_cells("gc", L))

    # -- adjacency ----------------------------------------------------------
    #
    # Cells of a domain-tiling view partition the Morton index space of the
    # finest grid into disjoint half-open ranges, so the cell containing any
    # point is found by binary search on the space-filling-curve keys.  All
    # adjacency queries below are built on that and fully vectorized.

    def _locate(self, ids_sorted: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Position (into ``ids_sorted``) of the view cell containing each
        point given in finest-grid units.  The view must tile the domain and
        be in SFC order; points must lie inside [0, 2^maxl)^d."""
        maxl = self.max_level
        keys = self._sfc_key(ids_sorted)
        pkeys = _morton_interleave(pts, maxl + 1)
        return np.searchsorted(keys, pkeys, side="right") - 1

    def _probe_offsets(self, sizes: np.ndarray) -> np.ndarray:
        """Per-cell probe points just outside the cell boundary, one per
        potential vertex-adjacent neighbor of level difference <= 1.

        Returns offsets (n, nprobe, d) in finest units relative to the cell's
        lower corner; callers add the corner and discard points outside the
        domain.  Per dimension the probe coordinate is -1 (low side), size
        (high side), or one of the two quarter points (tangential), which is
        enough to hit every equal-or-one-finer neighbor across each face,
        edge, and corner.
        """
        d = self.dim
        n = len(sizes)
        minus_one = np.full(n, -1, dtype=np.int64)
        quarters = (sizes // 4, (3 * sizes) // 4)
        probes = []
        for delta in product((-1, 0, 1), repeat=d):
            if not any(delta):
                continue
            per_dim = []
            for k in range(d):
                if delta[k] == -1:
                    per_dim.append((minus_one,))
                elif delta[k] == 1:
                    per_dim.append((sizes,))
                else:
                    per_dim.append(quarters)
            for combo in product(*per_dim):
                probes.append(np.stack(combo, axis=1))
        return np.stack(probes, axis=1)

    def adjacency_pairs_tiling(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vertex-adjacency pairs (positions into ``ids``) for a balanced
        domain-tiling view (GC levels and the active mesh)."""
        ids = np.asarray(ids, dtype=np.int64)
        maxl = self.max_level
        sizes = np.int64(1) << (maxl - self.level[ids])
        lo = self.coords[ids] << (maxl - self.level[ids])[:, None]
        offs = self._probe_offsets(sizes)  # (n, nprobe, d)
        pts = lo[:, None, :] + offs
        n, npr, d = pts.shape
        src = np.repeat(np.arange(n, dtype=np.int64), npr)
        pts = pts.reshape(-1, d)
        limit = np.int64(1) << maxl
        ok = ((pts >= 0) & (pts < limit)).all(axis=1)
        located = self._locate(ids, pts[ok])
        a = src[ok]
        b = located
        key = np.minimum(a, b) * np.int64(n) + np.maximum(a, b)
        key = key[a != b]
        uniq = np.unique(key)
        return uniq // n, uniq % n

    def contact_positive_dims(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Number of dimensions in which the closed boxes of cells ``a`` and
        ``b`` overlap with positive length."""
        maxl = self.max_level
        la = self.level[a]
        lb = self.level[b]
        loa = self.coords[a] << (maxl - la)[:, None]
        hia = loa + (np.int64(1) << (maxl - la))[:, None]
        lob = self.coords[b] << (maxl - lb)[:, None]
        hib = lob + (np.int64(1) << (maxl - lb))[:, None]
        lo = np.maximum(loa, lob)
        hi = np.minimum(hia, hib)
        return (hi > lo).sum(axis=1)

    # -- statistics ----------------------------------------------------------

    def coarse_cover_levels(self) -> tuple[np.ndarray, np.ndarray]:
        """For every active cell, probe the center of each same-size neighbor
        box and return (probing position, position of the covering leaf).

        When the probed box lies inside a coarser leaf, that leaf covers the
        whole box, so the scheme detects every active pair violating 2:1
        balance regardless of the level gap.
        """
        ids = self.active_cells()
        maxl = self.max_level
        d = self.dim
        sizes = np.int64(1) << (maxl - self.level[ids])
        lo = self.coords[ids] << (maxl - self.level[ids])[:, None]
        deltas = np.array(
            [dl for dl in product((-1, 0, 1), repeat=d) if any(dl)], dtype=np.int64
        )
        pts = (
            lo[:, None, :]
            + deltas[None, :, :] * sizes[:, None, None]
            + (sizes // 2)[:, None, None]
        )
        n, npr, _ = pts.shape
        src = np.repeat(np.arange(n, dtype=np.int64), npr)
        pts = pts.reshape(-1, d)
        limit = np.int64(1) << maxl
        ok = ((pts >= 0) & (pts < limit)).all(axis=1)
        located = self._locate(ids, pts[ok])
        return ids[src[ok]], ids[located]

    def hanging_cell_mask(self, ids: np.ndarray) -> np.ndarray:
        """Mark the cells of a (balanced) view that carry hanging-node
        constraints: cells with a strictly coarser neighbor touching through
        a contact of positive extent (a face, or an edge in 3D)."""
        ids = np.asarray(ids, dtype=np.int64)
        pi, pj = self.adjacency_pairs_tiling(ids)
        mask = np.zeros(len(ids), dtype=bool)
        if len(pi) == 0:
            return mask
        la = self.level[ids[pi]]
        lb = self.level[ids[pj]]
        diff = la != lb
        if not diff.any():
            return mask
        pi, pj, la, lb = pi[diff], pj[diff], la[diff], lb[diff]
        ndims = self.contact_positive_dims(ids[pi], ids[pj])
        touch = ndims >= 1
        finer_i = la > lb
        mask_idx = np.where(finer_i, pi, pj)[touch]
        mask[mask_idx] = True
        return mask


@dataclass(frozen=True)
class LevelView:
    """A selection of cells of a mesh forming one multigrid level."""

    mesh: TreeMesh
    variant: str
    level: int
    cells: np.ndarray = field(repr=False)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def tiles_domain(self) -> bool:
        """Whether the view's cells cover [-1, 1]^d exactly."""
        h = self.mesh.cell_size(self.cells)
        return bool(np.isclose((h**self.mesh.dim).sum(), 2.0**self.mesh.dim))


# -- balancing ----------------------------------------------------------------


def _balance_in_place(mesh: TreeMesh) -> None:
    """Refine until vertex-adjacent leaves differ by at most one level."""
    while True:
        if mesh.max_level <= 1:
            return
        src, cover = mesh.coarse_cover_levels()
        mark = cover[mesh.level[cover] <= mesh.level[src] - 2]
        if len(mark) == 0:
            return
        mesh.refine_cells(np.unique(mark))


def balance_2to1(mesh: TreeMesh) -> TreeMesh:
    """Return the minimal 2:1-balanced refinement of ``mesh``.

    Vertex neighbors are used as the balance criterion; the operation is
    idempotent and leaves already-balanced meshes untouched (up to copy).
    """
    out = mesh.copy()
    _balance_in_place(out)
    return out


def is_balanced(mesh: TreeMesh) -> bool:
    if mesh.max_level <= 1:
        return True
    src, cover = mesh.coarse_cover_levels()
    return bool((mesh.level[cover] >= mesh.level[src] - 1).all())


# -- benchmark mesh generators -------------------------------------------------


def refine_uniform(L: int, dim: int) -> TreeMesh:
    """Uniformly refined mesh with 2^(d*L) active cells and no hanging nodes."""
    mesh = TreeMesh(dim)
    for _ in range(L):
        mesh.refine_cells(np.nonzero(mesh.first_child < 0)[0])
    return mesh


def refine_octant(L: int, dim: int = 3) -> TreeMesh:
    """Mesh refined toward the first orthant [-1, 0]^d.

    One global refinement followed by ``L - 1`` steps refining every active
    cell whose center lies strictly inside the first orthant, with 2:1
    closure after each step.  Deterministic for fixed (L, d).
    """
    if L < 0:
        raise ValueError("number of refinements must be non-negative")
    mesh = TreeMesh(dim)
    if L == 0:
        return mesh
    mesh.refine_cells([0])
    for _ in range(1, L):
        ids = np.nonzero(mesh.first_child < 0)[0]
        centers = mesh.cell_center(ids)
        flag = (centers < 0.0).all(axis=1)
        if flag.any():
            mesh.refine_cells(ids[flag])
        _balance_in_place(mesh)
    return mesh


_SHELL_BANDS = ((0.0, 0.55), (0.3, 0.43), (0.335, 0.39))


def refine_shell(L: int, dim: int = 3) -> TreeMesh:
    """Shell-refined mesh: L-3 uniform refinements, then three local steps
    refining cells whose center norm lies in successively thinner shells."""
    if dim != 3:
        raise ValueError("shell refinement is defined for d=3 only")
    if L < 5:
        raise ValueError(f"shell refinement requires L >= 5, got {L}")
    mesh = refine_uniform(L - 3, dim)
    for lo, hi in _SHELL_BANDS:
        ids = np.nonzero(mesh.first_child < 0)[0]
        r = np.linalg.norm(mesh.cell_center(ids), axis=1)
        flag = (lo <= r) & (r <= hi)
        if flag.any():
            mesh.refine_cells(ids[flag])
        _balance_in_place(mesh)
    return mesh


# -- statistics export ---------------------------------------------------------


def mesh_statistics(mesh: TreeMesh) -> dict:
    """Per-level and active cell counts plus hanging-node cell counts."""
    active = mesh.active_cells()
    hang = mesh.hanging_cell_mask(active)
    levels = mesh.level[active]
    per_level = {int(l): int((levels == l).sum()) for l in np.unique(levels)}
    return {
        "dim": mesh.dim,
        "max_level": mesh.max_level,
        "n_active_cells": int(len(active)),
        "n_tree_cells": int(mesh.n_cells),
        "active_cells_per_level": per_level,
        "n_hanging_cells": int(hang.sum()),
        "hanging_cell_share": float(hang.sum() / max(len(active), 1)),
    }


def statistics_json(mesh: TreeMesh) -> str:
    return json.dumps(mesh_statistics(mesh), indent=2, sort_keys=True)
