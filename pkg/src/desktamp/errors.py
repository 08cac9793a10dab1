"""Exception types shared across the pipeline.

Stage errors deliberately form a flat-ish hierarchy: the trial harness
catches them by class to attribute failures to pipeline stages.
"""


class DesktampError(Exception):
    """Base class for all package errors."""


# --- geometry ---

class DegenerateInput(DesktampError):
    """Point set too small or collinear for the requested construction."""


class NoPlaneFound(DesktampError):
    """RANSAC could not reach the required inlier fraction."""


# --- perception ---

class EmptyView(DesktampError):
    """Rendered observation contains no object pixel."""


class TooFewPoints(DesktampError):
    """A detection mask selected fewer than 3 cloud points."""

    def __init__(self, object_id, n_points=0):
        super().__init__(f"mask {object_id} yields {n_points} points")
        self.object_id = object_id
        self.n_points = n_points


class NoSurfacePoints(DesktampError):
    """Wipe-region bounding box hit no surface points."""


# --- grounding ---

class GroundingError(DesktampError):
    """Base for all goal-grounding failures (maps to the vlm failure class)."""


class UnresolvedReference(GroundingError):
    def __init__(self, token):
        super().__init__(f"cannot resolve reference {token!r}")
        self.token = token


class AmbiguousReference(GroundingError):
    def __init__(self, token, candidates):
        super().__init__(f"reference {token!r} matches {sorted(candidates)}")
        self.token = token
        self.candidates = list(candidates)


class GrammarMiss(GroundingError):
    def __init__(self, instruction):
        super().__init__(f"no grammar template matches {instruction!r}")
        self.instruction = instruction


class TransportError(GroundingError):
    """Remote grounder endpoint unreachable or request failed."""


class SchemaError(GroundingError):
    def __init__(self, path, detail=""):
        super().__init__(f"bad response at {path}: {detail}")
        self.path = path


class ValidationError(GroundingError):
    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


class UnknownEntity(DesktampError):
    """Goal predicate references an entity absent from the scene."""


# --- planning ---

class NoSkeleton(DesktampError):
    """No symbolic plan exists within the length bound."""


class NoGraspSource(DesktampError):
    def __init__(self, object_id):
        super().__init__(f"no grasp candidates for object {object_id!r}")
        self.object_id = object_id


class PlanTimeout(DesktampError):
    def __init__(self, budget):
        super().__init__(f"planning budget of {budget} s exhausted")
        self.budget = budget


class NoFeasiblePlan(DesktampError):
    """All skeletons exhausted without a fully satisfied, executable particle.

    ``cause`` records the last blocking stage: 'grasps', 'optimization' or
    'motion' (used by failure classification).
    """

    def __init__(self, cause="optimization"):
        super().__init__(f"no feasible plan (cause: {cause})")
        self.cause = cause


# --- motion ---

class JointLimit(DesktampError):
    """Configuration outside the arm's joint limits."""


class Unreachable(DesktampError):
    """Target pose outside the arm's workspace."""


class StartInCollision(DesktampError):
    pass


class GoalInCollision(DesktampError):
    pass


class MotionTimeout(DesktampError):
    def __init__(self, max_iters):
        super().__init__(f"motion planner exhausted {max_iters} iterations")
        self.max_iters = max_iters


# --- execution ---

class EraserTooLarge(DesktampError):
    """Eraser neither fits the wipe region's short side nor covers the region."""


# --- harness ---

class ParseError(DesktampError):
    def __init__(self, detail, line=None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{detail}{where}")
        self.line = line


class InvariantError(DesktampError):
    def __init__(self, field, detail=""):
        super().__init__(f"invariant violated on {field}: {detail}")
        self.field = field


class Unclassifiable(DesktampError):
    """Trial failed but no classification rule fired."""
