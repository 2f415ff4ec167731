"""Benchmark harness: configured Poisson solves, convergence studies, and
partition-metric sweeps with machine-readable output.

Every run emits rows of a fixed, versioned schema; identical configurations
produce byte-identical CSV.  Heavy intermediate objects (meshes,
hierarchies, active operators) are cached per process so that several runs
on the same case share setup work.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .fem import build_dirichlet_constraints, merge_constraints
from .mesh import TreeMesh, refine_octant, refine_shell, refine_uniform
from .multigrid import (
    DivergenceError,
    MultigridOptions,
    build_hierarchy,
    pcg_solve,
)
from .operator import LevelOperator
from .partition import (
    MetricsReport,
    PartitionModel,
    compute_metrics,
    first_child_policy,
    hanging_weight_fn,
    partition_active_sfc,
    repartition_levels_sfc,
)

__all__ = [
    "SCHEMA_VERSION",
    "CSV_COLUMNS",
    "BenchmarkConfig",
    "ResultRow",
    "ConfigError",
    "run_benchmark",
    "run_convergence_study",
    "run_metrics_sweep",
    "rows_to_csv",
    "rows_to_json",
    "PRESETS",
    "clear_caches",
]

SCHEMA_VERSION = 1

CSV_COLUMNS = [
    "case", "L", "p", "variant", "P", "policy", "k", "precision",
    "iterations", "n_dofs", "W_s", "W_p", "wl_eff", "h_eff", "v_eff",
    "l2_error",
]

CONVERGENCE_COLUMNS = [
    "case", "L", "p", "variant", "n_dofs", "iterations", "l2_error",
    "observed_order",
]

METRICS_COLUMNS = [
    "case", "L", "variant", "P", "policy", "n_levels", "W_s", "W_p",
    "wl_eff", "h_eff", "v_eff",
]

PROFILE_COLUMNS = [
    "case", "L", "variant", "P", "policy", "level", "min_cells",
    "max_cells", "avg_cells",
]


class ConfigError(ValueError):
    """Invalid benchmark configuration."""


@dataclass(frozen=True)
class BenchmarkConfig:
    """One benchmark instance of the experiment matrix."""

    case: str                       # octant | shell | cube | gaussian
    refinements: int                # L
    degree: int                     # p
    variant: str = "gc"             # ls | gc | pc
    pc_coarse: str = "gc"           # geometric continuation of pc
    ranks: int = 1                  # simulated rank count P
    policy: str = "auto"            # auto | first_child | sfc_per_level
    smoother_degree: int = 3
    rtol: float = 1e-4
    precision: str = "single"       # V-cycle precision; CG always double
    hn_weight: float = 2.0
    max_iterations: int = 100

    def validate(self) -> None:
        if self.case not in ("octant", "shell", "cube", "gaussian"):
            raise ConfigError(f"unknown case {self.case!r}")
        if self.variant not in ("ls", "gc", "pc"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.case == "shell" and self.refinements < 5:
            raise ConfigError("the shell case requires L >= 5")
        if self.refinements < 0:
            raise ConfigError("refinements must be non-negative")
        if self.degree < 1:
            raise ConfigError("degree must be >= 1")
        if self.variant == "pc" and self.degree < 2:
            raise ConfigError("polynomial coarsening requires p >= 2")
        if self.precision not in ("double", "single"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.policy not in ("auto", "first_child", "sfc_per_level"):
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.ranks < 1:
            raise ConfigError("ranks must be >= 1")
        if self.rtol <= 0 or self.rtol >= 1:
            raise ConfigError("rtol must lie in (0, 1)")

    @property
    def resolved_policy(self) -> str:
        if self.policy != "auto":
            return self.policy
        return "first_child" if self.variant == "ls" else "sfc_per_level"


@dataclass
class ResultRow:
    """One line of benchmark output; the schema is fixed and versioned."""

    schema_version: int
    config: BenchmarkConfig
    iterations: int
    n_dofs: int
    per_level_cells: list
    metrics: MetricsReport
    l2_error: float | None = None
    linf_error: float | None = None
    status: str = "ok"

    def to_record(self) -> dict:
        c = self.config
        return {
            "case": c.case,
            "L": c.refinements,
            "p": c.degree,
            "variant": c.variant,
            "P": c.ranks,
            "policy": c.resolved_policy,
            "k": c.smoother_degree,
            "precision": c.precision,
            "iterations": self.iterations,
            "n_dofs": self.n_dofs,
            "W_s": self.metrics.serial_workload,
            "W_p": self.metrics.parallel_workload,
            "wl_eff": self.metrics.workload_efficiency,
            "h_eff": self.metrics.horizontal_efficiency,
            "v_eff": self.metrics.vertical_efficiency,
            "l2_error": self.l2_error,
        }

    def to_json_record(self) -> dict:
        rec = self.to_record()
        rec.update(
            schema_version=self.schema_version,
            status=self.status,
            linf_error=self.linf_error,
            per_level_cells=list(self.per_level_cells),
            level_min_cells=list(self.metrics.level_min_cells),
            level_max_cells=list(self.metrics.level_max_cells),
            level_avg_cells=list(self.metrics.level_avg_cells),
            rtol=self.config.rtol,
            pc_coarse=self.config.pc_coarse,
            hn_weight=self.config.hn_weight,
        )
        return rec


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(records: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for rec in records:
        w.writerow([_fmt(rec.get(col)) for col in columns])
    return buf.getvalue()


def rows_to_json(records: list[dict]) -> str:
    return json.dumps(records, indent=2, sort_keys=True) + "\n"


# -- problem definitions --------------------------------------------------------

GAUSS_CENTER = np.array([-0.5, -0.5, -0.5])
GAUSS_ALPHA = 0.1


def gaussian_solution(x: np.ndarray) -> np.ndarray:
    """Reference solution of the analytic benchmark: a normalized peak
    centered inside the refined octant (exponent linear in the distance)."""
    r = np.linalg.norm(x - GAUSS_CENTER, axis=1)
    scale = (1.0 / (GAUSS_ALPHA * np.sqrt(2.0 * np.pi))) ** 3
    return scale * np.exp(-r / GAUSS_ALPHA**2)


def gaussian_rhs(x: np.ndarray) -> np.ndarray:
    """-Laplacian of the reference solution (d=3)."""
    r = np.linalg.norm(x - GAUSS_CENTER, axis=1)
    u = gaussian_solution(x)
    a2 = GAUSS_ALPHA**2
    return u * (2.0 / (a2 * np.maximum(r, 1e-300)) - 1.0 / a2**2)


def _case_problem(case: str):
    """Right-hand side, boundary values, exact solution (or None)."""
    if case == "gaussian":
        return gaussian_rhs, gaussian_solution, gaussian_solution
    ones = lambda x: np.ones(len(x))
    zeros = lambda x: np.zeros(len(x))
    return ones, zeros, None


_mesh_cache: dict = {}
_hier_cache: dict = {}
_op_cache: dict = {}


def clear_caches() -> None:
    _mesh_cache.clear()
    _hier_cache.clear()
    _op_cache.clear()


def build_case_mesh(case: str, L: int) -> TreeMesh:
    key = (case, L)
    if key not in _mesh_cache:
        if case == "cube":
            _mesh_cache[key] = refine_uniform(L, 3)
        elif case in ("octant", "gaussian"):
            _mesh_cache[key] = refine_octant(L, 3)
        elif case == "shell":
            _mesh_cache[key] = refine_shell(L)
        else:
            raise ConfigError(f"unknown case {case!r}")
    return _mesh_cache[key]


def _hierarchy(config: BenchmarkConfig, mesh: TreeMesh):
    key = (config.case, config.refinements, config.degree, config.variant,
           config.precision, config.smoother_degree, config.pc_coarse)
    if key not in _hier_cache:
        opts = MultigridOptions(
            smoother_degree=config.smoother_degree,
            precision=config.precision,
            pc_coarse=config.pc_coarse,
        )
        _hier_cache[key] = build_hierarchy(mesh, config.degree, config.variant, opts)
    return _hier_cache[key]


def _active_operator(config: BenchmarkConfig, hierarchy):
    """Double-precision operator of the active mesh with the case's
    boundary data, for the outer conjugate-gradient iteration."""
    key = (config.case, config.refinements, config.degree)
    if key not in _op_cache:
        f, g, exact = _case_problem(config.case)
        dm = hierarchy.active_dofmap
        cons = merge_constraints(
            hierarchy.active_hanging, build_dirichlet_constraints(dm, g)
        )
        _op_cache[key] = LevelOperator(dm, cons)
    return _op_cache[key]


def _partition_model(config: BenchmarkConfig, mesh: TreeMesh,
                     n_chain_levels: int | None = None) -> PartitionModel:
    wfn = hanging_weight_fn(config.hn_weight)
    policy = config.resolved_policy
    if config.variant == "pc":
        # all chain levels live on the active mesh; partition it once
        active = mesh.active_cells()
        owners1 = partition_active_sfc(mesh, config.ranks, wfn)
        nlev = n_chain_levels or 1
        levels = [active] * nlev
        owners = [owners1] * nlev
        parents = [np.full(len(active), -1, dtype=np.int64)]
        parents += [np.arange(len(active), dtype=np.int64)] * (nlev - 1)
        return PartitionModel(mesh, config.ranks, policy, levels, owners, parents)
    if policy == "first_child":
        ap = partition_active_sfc(mesh, config.ranks, wfn)
        return first_child_policy(mesh, ap, config.ranks, variant=config.variant)
    return repartition_levels_sfc(mesh, config.ranks, wfn, variant=config.variant)


def _rhs_quadrature(config: BenchmarkConfig):
    # the analytic case's forcing varies on the scale alpha^2 and is much
    # rougher than the solution space; integrate it with extra Gauss points
    if config.case == "gaussian":
        return config.degree + 4
    return None


def run_benchmark(config: BenchmarkConfig) -> ResultRow:
    """Build the mesh and hierarchy of a configuration and solve the Poisson
    problem, returning iteration counts, partition metrics, and (for the
    analytic case) discretization errors."""
    config.validate()
    mesh = build_case_mesh(config.case, config.refinements)
    hierarchy = _hierarchy(config, mesh)
    A = _active_operator(config, hierarchy)
    f, g, exact = _case_problem(config.case)
    dm = hierarchy.active_dofmap
    cons = A.constraints

    n_quad = _rhs_quadrature(config)
    b_raw = A.integrate_rhs(f, n_quad=n_quad)
    u_g = cons.lift_vector(dm.n_dofs)
    if np.any(u_g):
        b_raw = b_raw - np.asarray(A.apply_raw(u_g), dtype=float)
    b_hat = cons.resolution_matrix(dm.n_dofs).T @ b_raw

    status = "ok"
    try:
        x_hat, iterations = pcg_solve(
            A, b_hat, preconditioner=hierarchy.vcycle,
            rtol=config.rtol, max_iterations=config.max_iterations,
        )
    except DivergenceError:
        status = "diverged"
        iterations = -1
        x_hat = np.zeros(dm.n_dofs)

    u = cons.apply_values(x_hat + u_g)

    l2 = linf = None
    if exact is not None and status == "ok":
        l2 = A.integrate_l2_error(u, exact, n_quad=n_quad)
        linf = float(np.abs(u - exact(dm.node_coords)).max())

    model = _partition_model(config, mesh, n_chain_levels=len(hierarchy.levels))
    metrics = compute_metrics(model)
    per_level = [len(ids) for ids in model.levels]
    return ResultRow(
        schema_version=SCHEMA_VERSION,
        config=config,
        iterations=iterations,
        n_dofs=dm.n_dofs,
        per_level_cells=per_level,
        metrics=metrics,
        l2_error=l2,
        linf_error=linf,
        status=status,
    )


def run_convergence_study(degree: int, l_range, case: str = "gaussian",
                          variant: str = "gc", rtol: float = 1e-10,
                          precision: str = "double") -> list[dict]:
    """Sweep refinements for the analytic case and report L2 errors and
    observed orders between consecutive levels."""
    records = []
    prev_err = None
    for L in l_range:
        cfg = BenchmarkConfig(
            case=case, refinements=int(L), degree=degree, variant=variant,
            rtol=rtol, precision=precision,
        )
        row = run_benchmark(cfg)
        order = None
        if prev_err is not None and row.l2_error:
            order = float(np.log2(prev_err / row.l2_error))
        prev_err = row.l2_error
        records.append(
            {
                "case": case, "L": int(L), "p": degree, "variant": variant,
                "n_dofs": row.n_dofs, "iterations": row.iterations,
                "l2_error": row.l2_error, "observed_order": order,
            }
        )
    return records


def run_metrics_sweep(case: str, L: int, ranks_list, policies=None,
                      variants=("ls", "gc"), hn_weight: float = 2.0):
    """Partition metrics over (P, policy, variant) combinations; returns
    (summary records, per-level profile records)."""
    policies = policies or ("first_child", "sfc_per_level")
    mesh = build_case_mesh(case, L)
    wfn = hanging_weight_fn(hn_weight)
    summary, profile = [], []
    for variant in variants:
        for P in ranks_list:
            for policy in policies:
                if policy == "first_child":
                    ap = partition_active_sfc(mesh, P, wfn)
                    model = first_child_policy(mesh, ap, P, variant=variant)
                else:
                    model = repartition_levels_sfc(mesh, P, wfn, variant=variant)
                rep = compute_metrics(model)
                summary.append(
                    {
                        "case": case, "L": L, "variant": variant, "P": P,
                        "policy": policy, "n_levels": rep.n_levels,
                        "W_s": rep.serial_workload,
                        "W_p": rep.parallel_workload,
                        "wl_eff": rep.workload_efficiency,
                        "h_eff": rep.horizontal_efficiency,
                        "v_eff": rep.vertical_efficiency,
                    }
                )
                for l in range(rep.n_levels):
                    profile.append(
                        {
                            "case": case, "L": L, "variant": variant, "P": P,
                            "policy": policy, "level": l,
                            "min_cells": rep.level_min_cells[l],
                            "max_cells": rep.level_max_cells[l],
                            "avg_cells": rep.level_avg_cells[l],
                        }
                    )
    return summary, profile


# -- named presets ---------------------------------------------------------------

def _preset_grid():
    presets = {}
    for L in (3, 4, 5, 6):
        for p in (1, 2, 4):
            for variant in ("ls", "gc", "pc"):
                if variant == "pc" and p < 2:
                    continue
                presets[f"octant-L{L}-p{p}-{variant}"] = BenchmarkConfig(
                    "octant", L, p, variant
                )
    for L in (5, 6, 7):
        for p in (1, 2, 4):
            for variant in ("ls", "gc", "pc"):
                if variant == "pc" and p < 2:
                    continue
                presets[f"shell-L{L}-p{p}-{variant}"] = BenchmarkConfig(
                    "shell", L, p, variant
                )
    for L in (2, 3, 4):
        for p in (1, 2):
            for variant in ("ls", "gc"):
                presets[f"cube-L{L}-p{p}-{variant}"] = BenchmarkConfig(
                    "cube", L, p, variant
                )
    for L in (3, 4, 5):
        for p in (1, 2):
            presets[f"gaussian-L{L}-p{p}-gc"] = BenchmarkConfig(
                "gaussian", L, p, "gc"
            )
    return presets


PRESETS = _preset_grid()
