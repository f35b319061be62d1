"""Adaptive Kirchhoff plate solver on hierarchical B-splines.

Solves the fourth-order plate bending problem with C^{p-1} hierarchical
B-spline spaces, estimates the energy error with element-local Bernstein
bubble systems, and drives maximum-strategy adaptive refinement on
admissible dyadic meshes.
"""

from .adaptivity import (
    IterationRecord,
    LoopConfig,
    MarkParams,
    StagnationError,
    expand_marks,
    mark_maximum,
    run,
    slopes,
)
from .assembly import (
    BoundaryDataError,
    DiscreteField,
    GeometryError,
    GeometryMap,
    LinearSystem,
    PlateProblem,
    SolverError,
    apply_dirichlet,
    assemble_load,
    assemble_stiffness,
    assemble_system,
    evaluate,
    h2_seminorm_error,
    pushforward2,
    quadrature,
    solve,
)
from .benchmarks import (
    BenchmarkSpec,
    benchmark_point_load,
    benchmark_singular,
    benchmark_smooth,
    benchmark_spline_exact,
    center_deflection_reference,
)
from .estimators import (
    BubbleBlock,
    BubbleSpace,
    EffectivityReport,
    ElementEstimate,
    assemble_blocks,
    build_bubble_space,
    effectivity,
    estimate,
    eta_elements,
    residual_estimator,
    solve_blocks,
)
from .hierarchy import (
    ElementId,
    FunctionId,
    HierarchicalBasis,
    HierarchicalMesh,
    HierarchicalSpace,
    RefinementLimitError,
    check_admissible,
    connectivity,
    dump_mesh,
    init,
    neighbors,
    rebuild_basis,
    refine,
)
from .splines import (
    BasisEval,
    KnotVector,
    dyadic_refine,
    eval_bernstein_ders,
    eval_ders,
    make_open_uniform,
    tensor_eval,
)

__all__ = [
    "BasisEval",
    "BenchmarkSpec",
    "BoundaryDataError",
    "BubbleBlock",
    "BubbleSpace",
    "DiscreteField",
    "EffectivityReport",
    "ElementEstimate",
    "ElementId",
    "FunctionId",
    "GeometryError",
    "GeometryMap",
    "HierarchicalBasis",
    "HierarchicalMesh",
    "HierarchicalSpace",
    "IterationRecord",
    "KnotVector",
    "LinearSystem",
    "LoopConfig",
    "MarkParams",
    "PlateProblem",
    "RefinementLimitError",
    "SolverError",
    "StagnationError",
    "apply_dirichlet",
    "assemble_blocks",
    "assemble_load",
    "assemble_stiffness",
    "assemble_system",
    "benchmark_point_load",
    "benchmark_singular",
    "benchmark_smooth",
    "benchmark_spline_exact",
    "build_bubble_space",
    "center_deflection_reference",
    "check_admissible",
    "connectivity",
    "dump_mesh",
    "dyadic_refine",
    "effectivity",
    "estimate",
    "eta_elements",
    "eval_bernstein_ders",
    "eval_ders",
    "evaluate",
    "expand_marks",
    "h2_seminorm_error",
    "init",
    "make_open_uniform",
    "mark_maximum",
    "neighbors",
    "pushforward2",
    "quadrature",
    "rebuild_basis",
    "refine",
    "residual_estimator",
    "run",
    "slopes",
    "solve",
    "solve_blocks",
    "tensor_eval",
]
