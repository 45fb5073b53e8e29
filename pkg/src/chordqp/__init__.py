"""Loosely coupled QPs solved by message passing over clique trees."""

from .coupled_qp import CoupledQP, QuadraticTerm, VariableSpace, assemble_dense, from_dict, load, save, to_dict
from .errors import (
    ChordQPError,
    InconsistentConstraints,
    InvalidProblem,
    NumericalBreakdown,
    SeparatorMismatch,
    SingularG,
    SingularKKT,
)
from .graph import (
    CliqueTree,
    SparsityGraph,
    assign_terms,
    build_clique_tree,
    build_sparsity_graph,
    chordal_embedding,
    cliques_and_tree,
    enumerate_cliques,
    maximum_cardinality_search,
    merge_cliques,
    tree_for_problem,
)
from .ipm import IpmSettings, solve_ipm
from .mp_solver import solve_tree
from .mpc_models import (
    ClassicalMpc,
    DistributedMpc,
    LassoMpc,
    ScenarioMpc,
    Subsystem,
    lower_classical,
    lower_distributed,
    lower_lasso,
    lower_parallel,
    lower_scenario,
)
from .riccati_oracle import riccati_backward, riccati_rollout

__version__ = "0.1.0"
