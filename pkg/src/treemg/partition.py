"""Simulated multi-rank partitioning of level hierarchies and its metrics.

No messages are exchanged anywhere: partitions are plain owner arrays over
the cells of each level, produced either by weighted prefix splits along the
space-filling curve or by the first-child policy that assigns every parent
cell the rank of its Morton-lowest child.  The workload and communication
metrics summarize how well such an assignment would balance a distributed
run; solver results never depend on them.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .mesh import TreeMesh

__all__ = [
    "PartitionModel",
    "MetricsReport",
    "partition_active_sfc",
    "first_child_policy",
    "repartition_levels_sfc",
    "hanging_weight_fn",
    "serial_workload",
    "parallel_workload",
    "workload_efficiency",
    "horizontal_efficiency",
    "vertical_efficiency",
    "compute_metrics",
]


def hanging_weight_fn(factor: float = 2.0):
    """Default cell weighting: ``factor`` for cells carrying hanging-node
    constraints, 1.0 otherwise."""

    def fn(mesh: TreeMesh, cells: np.ndarray) -> np.ndarray:
        w = np.ones(len(cells))
        w[mesh.hanging_cell_mask(cells)] = factor
        return w

    return fn


@dataclass
class PartitionModel:
    """Owner assignment for every cell of every level of a hierarchy.

    ``levels[l]`` is a cell id array (SFC order), ``owners[l]`` the per-cell
    rank, and ``parent_position[l]`` maps each cell of level l to the
    position of its counterpart (parent, or the cell itself when it persists)
    in level l-1; -1 on the coarsest level.
    """

    mesh: TreeMesh
    ranks: int
    policy: str
    levels: list = field(repr=False)
    owners: list = field(repr=False)
    parent_position: list = field(repr=False)

    @property
    def n_levels(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class MetricsReport:
    """The geometric performance quantities of one partition model."""

    ranks: int
    policy: str
    n_levels: int
    serial_workload: int
    parallel_workload: int
    workload_efficiency: float
    horizontal_efficiency: float
    vertical_efficiency: float
    level_min_cells: tuple
    level_max_cells: tuple
    level_avg_cells: tuple

    def to_dict(self) -> dict:
        return {
            "ranks": self.ranks,
            "policy": self.policy,
            "n_levels": self.n_levels,
            "serial_workload": self.serial_workload,
            "parallel_workload": self.parallel_workload,
            "workload_efficiency": self.workload_efficiency,
            "horizontal_efficiency": self.horizontal_efficiency,
            "vertical_efficiency": self.vertical_efficiency,
            "level_min_cells": list(self.level_min_cells),
            "level_max_cells": list(self.level_max_cells),
            "level_avg_cells": list(self.level_avg_cells),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv_rows(self) -> str:
        """Per-level rows: level, min/max/avg owned cells plus the scalars."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["level", "min_cells", "max_cells", "avg_cells", "ranks", "policy",
             "W_s", "W_p", "wl_eff", "h_eff", "v_eff"]
        )
        for l in range(self.n_levels):
            w.writerow(
                [l, self.level_min_cells[l], self.level_max_cells[l],
                 repr(self.level_avg_cells[l]), self.ranks, self.policy,
                 self.serial_workload, self.parallel_workload,
                 repr(self.workload_efficiency),
                 repr(self.horizontal_efficiency),
                 repr(self.vertical_efficiency)]
            )
        return buf.getvalue()


def partition_active_sfc(mesh: TreeMesh, ranks: int, weight_fn=None,
                         cells: np.ndarray | None = None) -> np.ndarray:
    """Morton-ordered prefix partition balancing cumulative cell weight.

    A cell goes to the rank whose equal-weight window contains the midpoint
    of the cell's weight interval, giving contiguous SFC ranges whose
    weighted imbalance is bounded by one maximal cell weight.  Ranks may own
    zero cells when there are more ranks than cells.
    """
    if ranks < 1:
        raise ValueError("need at least one rank")
    if cells is None:
        cells = mesh.active_cells()
    weight_fn = weight_fn or hanging_weight_fn()
    w = np.asarray(weight_fn(mesh, cells), dtype=float)
    total = w.sum()
    if total <= 0 or len(cells) == 0:
        return np.zeros(len(cells), dtype=np.int64)
    mid = np.cumsum(w) - 0.5 * w
    owners = np.floor(ranks * mid / total).astype(np.int64)
    return np.clip(owners, 0, ranks - 1)


def first_child_policy(mesh: TreeMesh, active_partition: np.ndarray,
                       ranks: int, variant: str = "ls") -> PartitionModel:
    """Partition the levels by recursively assigning every parent cell the
    rank of its first (Morton-lowest) child, starting from the given active
    partition.  ``variant`` selects which level sets the model materializes
    (the owner of a cell is the same either way)."""
    active = mesh.active_cells()
    if len(active_partition) != len(active):
        raise ValueError("active partition does not match the active mesh")
    owner_by_cell = np.full(mesh.n_cells, -1, dtype=np.int64)
    owner_by_cell[active] = active_partition
    # walk levels fine to coarse; first child = child_index 0
    for l in range(mesh.max_level - 1, -1, -1):
        ids = np.nonzero((mesh.level == l) & (mesh.first_child >= 0))[0]
        owner_by_cell[ids] = owner_by_cell[mesh.first_child[ids]]
    levels = [mesh.level_cells(variant, l) for l in range(mesh.max_level + 1)]
    owners = [owner_by_cell[ids] for ids in levels]
    parent_pos = _parent_positions(mesh, levels)
    return PartitionModel(mesh, ranks, "first_child", levels, owners, parent_pos)


def repartition_levels_sfc(mesh: TreeMesh, ranks: int, weight_fn=None,
                           variant: str = "gc") -> PartitionModel:
    """Partition each level separately along the space-filling curve."""
    weight_fn = weight_fn or hanging_weight_fn()
    levels = [mesh.level_cells(variant, l) for l in range(mesh.max_level + 1)]
    owners = [
        partition_active_sfc(mesh, ranks, weight_fn, cells=ids) for ids in levels
    ]
    parent_pos = _parent_positions(mesh, levels)
    return PartitionModel(mesh, ranks, "sfc_per_level", levels, owners, parent_pos)


def _parent_positions(mesh: TreeMesh, levels: list) -> list:
    """Position of each cell's coarse counterpart on the next coarser level:
    its parent if the cell is new on this level, otherwise the cell itself."""
    out = [np.full(len(levels[0]), -1, dtype=np.int64)]
    for l in range(1, len(levels)):
        coarse_pos = {int(c): i for i, c in enumerate(levels[l - 1])}
        fine = levels[l]
        pos = np.empty(len(fine), dtype=np.int64)
        for i, cid in enumerate(fine):
            cid = int(cid)
            if cid in coarse_pos:
                pos[i] = coarse_pos[cid]
            else:
                pos[i] = coarse_pos[int(mesh.parent[cid])]
        out.append(pos)
    return out


def serial_workload(levels) -> int:
    """Total number of cells over all levels."""
    return int(sum(len(ids) for ids in levels))


def parallel_workload(model: PartitionModel) -> int:
    """Sum over levels of the maximum number of cells owned by any rank."""
    total = 0
    for owners in model.owners:
        if len(owners) == 0:
            continue
        total += int(np.bincount(owners, minlength=model.ranks).max())
    return total


def workload_efficiency(model: PartitionModel) -> float:
    """W_s / (W_p * ranks)."""
    wp = parallel_workload(model)
    ws = serial_workload(model.levels)
    return ws / (wp * model.ranks) if wp else 1.0


def horizontal_efficiency(model: PartitionModel, level: int) -> float:
    """Half the rank-accumulated ghost-cell count over the cell count.

    A ghost cell of a rank is a cell owned by another rank that shares at
    least a vertex with one of the rank's own cells.
    """
    ids = model.levels[level]
    owners = model.owners[level]
    if len(ids) == 0:
        return 0.0
    lev = model.mesh.level[ids]
    if (lev == lev[0]).all() and not _tiles(model.mesh, ids):
        pi, pj = _uniform_adjacency(model.mesh, ids)
    else:
        pi, pj = model.mesh.adjacency_pairs_tiling(ids)
    if len(pi) == 0:
        return 0.0
    ra, rb = owners[pi], owners[pj]
    m = ra != rb
    if not m.any():
        return 0.0
    # distinct (rank, ghost cell) pairs in both directions
    n = len(ids)
    keys = np.concatenate([ra[m] * np.int64(n) + pj[m], rb[m] * np.int64(n) + pi[m]])
    nghost = len(np.unique(keys))
    return 0.5 * nghost / len(ids)


def _tiles(mesh, ids) -> bool:
    h = mesh.cell_size(ids)
    return bool(np.isclose((h**mesh.dim).sum(), 2.0**mesh.dim))


def _uniform_adjacency(mesh, ids):
    """Vertex-adjacency pairs for a single-level (possibly non-tiling) set."""
    ids = np.asarray(ids, dtype=np.int64)
    lev = int(mesh.level[ids[0]])
    crd = mesh.coords[ids]
    d = mesh.dim
    key = crd[:, 0].astype(np.int64)
    for k in range(1, d):
        key = (key << 20) | crd[:, k]
    order = np.argsort(key)
    skey = key[order]
    from itertools import product

    deltas = np.array([dl for dl in product((-1, 0, 1), repeat=d) if any(dl)])
    pi = []
    pj = []
    for delta in deltas:
        nb = crd + delta
        ok = ((nb >= 0) & (nb < (1 << lev))).all(axis=1)
        q = nb[:, 0].astype(np.int64)
        for k in range(1, d):
            q = (q << 20) | nb[:, k]
        pos = np.clip(np.searchsorted(skey, q), 0, len(skey) - 1)
        hit = ok & (skey[pos] == q)
        pi.append(np.nonzero(hit)[0])
        pj.append(order[pos[hit]])
    pi = np.concatenate(pi)
    pj = np.concatenate(pj)
    n = len(ids)
    keys = np.unique(np.minimum(pi, pj) * np.int64(n) + np.maximum(pi, pj))
    return keys // n, keys % n


def aggregate_horizontal_efficiency(model: PartitionModel) -> float:
    """Ghost share accumulated over all levels of the hierarchy."""
    nghost2 = 0.0
    ncells = 0
    for l in range(model.n_levels):
        ids = model.levels[l]
        ncells += len(ids)
        nghost2 += horizontal_efficiency(model, l) * len(ids)
    return nghost2 / ncells if ncells else 0.0


def vertical_efficiency(model: PartitionModel) -> float:
    """Share of fine cells owned by the same rank as their coarse
    counterpart, over all level pairs."""
    match = 0
    total = 0
    for l in range(1, model.n_levels):
        pos = model.parent_position[l]
        total += len(pos)
        match += int(
            (model.owners[l] == model.owners[l - 1][pos]).sum()
        )
    return match / total if total else 1.0


def compute_metrics(model: PartitionModel) -> MetricsReport:
    """Evaluate all geometric performance quantities of a partition model."""
    per_min, per_max, per_avg = [], [], []
    for owners in model.owners:
        counts = np.bincount(owners, minlength=model.ranks)
        per_min.append(int(counts.min()))
        per_max.append(int(counts.max()))
        per_avg.append(float(counts.mean()))
    return MetricsReport(
        ranks=model.ranks,
        policy=model.policy,
        n_levels=model.n_levels,
        serial_workload=serial_workload(model.levels),
        parallel_workload=parallel_workload(model),
        workload_efficiency=workload_efficiency(model),
        horizontal_efficiency=aggregate_horizontal_efficiency(model),
        vertical_efficiency=vertical_efficiency(model),
        level_min_cells=tuple(per_min),
        level_max_cells=tuple(per_max),
        level_avg_cells=tuple(per_avg),
    )
