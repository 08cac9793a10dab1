"""Task-and-motion planning: skeleton enumeration over symbolic operators,
particle initialization/optimization over the continuous slots, skeleton
ranking, and the end-to-end solver that hands satisfied particles to the
motion planner."""

from .symbolic import (
    Action,
    Domain,
    PlanSkeleton,
    SymbolicState,
    domain_from_belief,
    enumerate_skeletons,
    goal_satisfied,
    replay,
    successors,
)
from .particles import (
    CostSpec,
    ParticleBatch,
    SkeletonProgram,
    compile_skeleton,
    init_particles,
    optimize_particles,
    rank_skeletons,
    validate_particle,
)
from .solver import Plan, PlanConfig, solve

__all__ = [
    "Action", "Domain", "PlanSkeleton", "SymbolicState", "domain_from_belief",
    "enumerate_skeletons", "goal_satisfied", "replay", "successors",
    "CostSpec", "ParticleBatch", "SkeletonProgram", "compile_skeleton",
    "init_particles", "optimize_particles", "rank_skeletons", "validate_particle",
    "Plan", "PlanConfig", "solve",
]
