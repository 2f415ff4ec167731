"""Matrix-free multigrid solvers for the Poisson equation on adaptively
refined quad/octree meshes, with simulated-partition performance metrics."""

from .benchmarks import (
    BenchmarkConfig,
    ConfigError,
    PRESETS,
    ResultRow,
    run_benchmark,
    run_convergence_study,
    run_metrics_sweep,
)
from .fem import (
    ConstraintSet,
    DofMap,
    LagrangeElement,
    QuadratureRule,
    build_dirichlet_constraints,
    build_hanging_node_constraints,
    distribute_dofs,
    merge_constraints,
)
from .mesh import (
    LevelView,
    TreeMesh,
    balance_2to1,
    mesh_statistics,
    refine_octant,
    refine_shell,
    refine_uniform,
)
from .multigrid import (
    ChebyshevSmoother,
    DivergenceError,
    Hierarchy,
    MultigridOptions,
    build_hierarchy,
    chebyshev_smooth,
    estimate_max_eigenvalue,
    pcg_solve,
)
from .operator import EdgeDofClassification, LevelOperator, compute_edge_dofs
from .partition import (
    MetricsReport,
    PartitionModel,
    compute_metrics,
    first_child_policy,
    partition_active_sfc,
    repartition_levels_sfc,
    workload_efficiency,
)
from .transfer import (
    TwoLevelTransfer,
    build_geometric_transfer,
    build_polynomial_transfer,
    element_prolongation_matrix,
)

__version__ = "0.1.0"
