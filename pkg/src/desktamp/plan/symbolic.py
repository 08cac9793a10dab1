"""Forward-search skeleton enumeration over pick/place/wipe operators.

Skeletons are action sequences with typed unbound continuous slots. The
search enumerates by exact plan length with an admissible remaining-cost
bound, so auxiliary relocations (pick something up and put it back down
elsewhere) are found once the length budget allows them. Successor
expansion is memoized per symbolic state across the whole search.
"""

from dataclasses import dataclass, field

from ..errors import NoSkeleton
from ..scene import TABLE

MOVE_FREE = "MoveFree"
PICK = "Pick"
MOVE_HOLDING = "MoveHolding"
PLACE = "Place"
WIPE = "Wipe"


@dataclass(frozen=True)
class SymbolicState:
    """holding + object placements + cleaned surfaces (conf token excluded
    from equality so memoization keys on the meaningful state)."""

    holding: str = None
    object_at: tuple = ()  # sorted (object, surface) pairs
    cleaned: frozenset = frozenset()
    conf_token: int = field(default=0, compare=False)

    def at(self, obj):
        for o, s in self.object_at:
            if o == obj:
                return s
        return None


def make_state(object_at, holding=None, cleaned=()):
    pairs = tuple(sorted(dict(object_at).items()))
    if holding is not None and any(o == holding for o, _ in pairs):
        raise ValueError("held object cannot have a placement")
    return SymbolicState(holding, pairs, frozenset(cleaned))


@dataclass
class Domain:
    movables: tuple
    surfaces: tuple  # placement-capable names; TABLE is implicit
    erasers: frozenset
    initial: SymbolicState

    def __post_init__(self):
        self.movables = tuple(sorted(self.movables))
        surf = [s for s in self.surfaces if s != TABLE]
        self.surfaces = tuple(sorted(surf) + [TABLE])
        self.erasers = frozenset(self.erasers)


def domain_from_belief(belief, erasers=()):
    """Symbolic domain over belief labels; every detection can support.

    ``erasers``: labels the grounder attributed IsEraser (perception alone
    cannot see the property).
    """
    labels = [obj.label for obj in belief.objects.values()]
    object_at = {lab: TABLE for lab in labels}
    # stacked objects: resting on whichever belief hull sits just below
    for obj in belief.objects.values():
        for other in belief.objects.values():
            if other is obj:
                continue
            if abs(obj.hull.z_base - other.hull.z_top) < 0.005:
                if other.top_obb.contains(obj.init_pose.as_array()[None, :2])[0]:
                    object_at[obj.label] = other.label
    return Domain(tuple(labels), tuple(labels), frozenset(erasers), make_state(object_at))


@dataclass(frozen=True)
class Action:
    name: str
    params: tuple

    def __str__(self):
        return f"{self.name}({', '.join(str(p) for p in self.params)})"


@dataclass
class PlanSkeleton:
    """Ordered operators with unbound continuous slots.

    ``macros`` is the compact (kind, args) pair sequence the search produced;
    ``actions`` the expanded operator listing; ``slots`` maps slot name to
    kind in {grasp, placement, configuration, trajectory}.
    """

    macros: tuple
    actions: tuple
    slots: dict
    index: int = 0

    def __len__(self):
        return len(self.actions)


def goal_satisfied(state, goal, domain):
    for pred in goal.predicates:
        if pred.name == "On":
            a, b = pred.args
            if state.holding == a or state.at(a) != b:
                return False
        elif pred.name == "IsCleaned":
            if pred.args[0] not in state.cleaned:
                return False
        elif pred.name == "IsEraser":
            if pred.args[0] not in domain.erasers:
                return False
    return True


def successors(state, domain, cache=None):
    """Grounded macro expansions: (macro, next_state), each macro 2 actions.

    Macros pair a transit move with its manipulation: (pick, o),
    (place, o, s), (wipe, e, s). Results are memoized in ``cache``.
    """
    if cache is not None and state in cache:
        return cache[state]
    out = []
    if state.holding is None:
        for obj in domain.movables:
            if state.at(obj) is None:
                continue
            # objects supporting something cannot be lifted from under it
            if any(s == obj for _, s in state.object_at):
                continue
            pairs = tuple((o, s) for o, s in state.object_at if o != obj)
            out.append((("pick", obj), SymbolicState(obj, pairs, state.cleaned)))
    else:
        held = state.holding
        for surf in domain.surfaces:
            if surf == held:
                continue
            pairs = tuple(sorted(state.object_at + ((held, surf),)))
            out.append(
                (("place", held, surf), SymbolicState(None, pairs, state.cleaned))
            )
        if held in domain.erasers:
            for surf in domain.surfaces:
                if surf in (held, TABLE) or surf in state.cleaned:
                    continue
                out.append(
                    (
                        ("wipe", held, surf),
                        SymbolicState(held, state.object_at, state.cleaned | {surf}),
                    )
                )
    out = tuple(out)
    if cache is not None:
        cache[state] = out
    return out


def _heuristic(state, goal, domain):
    """Admissible lower bound on remaining actions (2 per macro)."""
    unsat_on = []
    cost = 0
    for pred in goal.predicates:
        if pred.name == "On":
            a, b = pred.args
            if a not in domain.movables or b not in domain.surfaces:
                return None
            if state.holding != a and state.at(a) == b:
                continue
            unsat_on.append(a)
        elif pred.name == "IsCleaned":
            if not domain.erasers:
                return None
            if pred.args[0] not in domain.surfaces or pred.args[0] == TABLE:
                return None
            if pred.args[0] not in state.cleaned:
                cost += 2 if state.holding in domain.erasers else 4
        elif pred.name == "IsEraser":
            if pred.args[0] not in domain.erasers:
                return None
    cost += 4 * len(unsat_on)
    if state.holding in unsat_on:
        cost -= 2
    return cost


def enumerate_skeletons(domain, goal, max_len=12, k=20, use_cache=True):
    """Up to ``k`` skeletons in nondecreasing action count.

    Depth-first enumeration at each exact length with the admissible bound
    pruning branches that cannot finish in time; relocations of non-goal
    objects therefore appear as soon as the length budget admits them.
    """
    cache = {} if use_cache else None
    h0 = _heuristic(domain.initial, goal, domain)
    if h0 is None:
        raise NoSkeleton("goal is statically unsatisfiable in this domain")
    results = []

    def dfs(state, depth, length, seq):
        if len(results) >= k:
            return
        if goal_satisfied(state, goal, domain):
            # goal states are terminal: the plan was emitted at its own
            # length, padded continuations are not candidate skeletons
            if depth == length:
                results.append(tuple(seq))
            return
        if depth == length:
            return
        for macro, nxt in successors(state, domain, cache):
            h = _heuristic(nxt, goal, domain)
            if h is None or depth + 2 + h > length:
                continue
            seq.append(macro)
            dfs(nxt, depth + 2, length, seq)
            seq.pop()
            if len(results) >= k:
                return

    length = max(h0, 2)
    while length <= max_len and len(results) < k:
        dfs(domain.initial, 0, length, [])
        length += 2
    if not results:
        raise NoSkeleton(f"no skeleton within {max_len} actions")
    return [
        _expand(macros, domain, i) for i, macros in enumerate(results)
    ]


def _expand(macros, domain, index):
    """Turn a macro sequence into the operator listing with slot names."""
    actions = []
    slots = {}
    conf = 0
    grasp_id = 0
    place_id = 0
    traj_id = 0
    held_grasp = None
    for macro in macros:
        traj = f"?tau{traj_id}"
        slots[traj] = "trajectory"
        traj_id += 1
        if macro[0] == "pick":
            obj = macro[1]
            q_new = f"?q{conf + 1}"
            grasp = f"?g{grasp_id}"
            slots[q_new] = "configuration"
            slots[grasp] = "grasp"
            actions.append(Action(MOVE_FREE, (f"q{conf}" if conf == 0 else f"?q{conf}", q_new, traj)))
            actions.append(Action(PICK, (obj, grasp, f"p0[{obj}]", q_new)))
            held_grasp = grasp
            grasp_id += 1
        elif macro[0] == "place":
            obj, surf = macro[1], macro[2]
            q_new = f"?q{conf + 1}"
            place = f"?p{place_id}"
            slots[q_new] = "configuration"
            slots[place] = "placement"
            actions.append(
                Action(MOVE_HOLDING, (obj, held_grasp, f"?q{conf}", q_new, traj))
            )
            actions.append(Action(PLACE, (obj, held_grasp, place, surf, q_new)))
            place_id += 1
        else:
            eraser, surf = macro[1], macro[2]
            q_new = f"?q{conf + 1}"
            slots[q_new] = "configuration"
            actions.append(
                Action(MOVE_HOLDING, (eraser, held_grasp, f"?q{conf}", q_new, traj))
            )
            actions.append(Action(WIPE, (eraser, surf, q_new)))
        conf += 1
    return PlanSkeleton(tuple(macros), tuple(actions), slots, index)


def replay(macros, domain):
    """Symbolically simulate a macro sequence; returns the final state or
    None when some precondition fails."""
    state = domain.initial
    for macro in macros:
        nxt = None
        for cand, result in successors(state, domain):
            if cand == macro:
                nxt = result
                break
        if nxt is None:
            return None
        state = nxt
    return state
