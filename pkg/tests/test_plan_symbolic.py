import itertools

import numpy as np
import pytest

from desktamp.errors import NoSkeleton
from desktamp.ground import GoalSpec, Predicate
from desktamp.plan import (
    Domain,
    enumerate_skeletons,
    goal_satisfied,
    replay,
    successors,
)
from desktamp.plan.symbolic import make_state
from desktamp.scene import TABLE


def bfs_all_plans(domain, goal, max_len):
    """Exhaustive breadth-first enumeration oracle (no pruning, no cache).

    Goal states are terminal: a sequence is collected when it first reaches
    the goal and is not extended further.
    """
    out = []
    frontier = [(domain.initial, ())]
    depth = 0
    if goal_satisfied(domain.initial, goal, domain):
        return out
    while depth < max_len:
        nxt = []
        for state, seq in frontier:
            for macro, succ in successors(state, domain):
                nseq = seq + (macro,)
                if goal_satisfied(succ, goal, domain):
                    out.append(nseq)
                else:
                    nxt.append((succ, nseq))
        frontier = nxt
        depth += 2
    return out


def simple_domain(n_obj=1, surfaces=("tray",), erasers=()):
    movables = tuple(f"obj{i}" for i in range(n_obj))
    return Domain(
        movables, movables + tuple(surfaces), frozenset(erasers),
        make_state({m: TABLE for m in movables}),
    )


def goal_on(*pairs):
    return GoalSpec(tuple(Predicate("On", p) for p in pairs))


def test_shortest_skeleton_is_four_actions():
    dom = Domain(("crackers",), ("crackers", "tray"), frozenset(),
                 make_state({"crackers": TABLE}))
    skels = enumerate_skeletons(dom, goal_on(("crackers", "tray")), max_len=8, k=50)
    first = skels[0]
    assert len(first) == 4
    names = [a.name for a in first.actions]
    assert names == ["MoveFree", "Pick", "MoveHolding", "Place"]
    assert first.actions[1].params[0] == "crackers"
    assert first.actions[3].params[3] == "tray"
    kinds = sorted(first.slots.values())
    assert kinds == ["configuration", "configuration", "grasp", "placement",
                     "trajectory", "trajectory"]


def test_distractor_relocation_variant_present():
    dom = Domain(("a", "d"), ("a", "d", "tray"), frozenset(),
                 make_state({"a": TABLE, "d": TABLE}))
    goal = goal_on(("a", "tray"))
    skels = enumerate_skeletons(dom, goal, max_len=8, k=200)
    lengths = [len(s) for s in skels]
    assert lengths == sorted(lengths)
    eights = [s for s in skels if len(s) == 8]
    reloc = [
        s for s in eights
        if s.macros[0] == ("pick", "d") and s.macros[1][0] == "place"
        and s.macros[2] == ("pick", "a")
    ]
    assert reloc, "expected a variant relocating d before picking a"


def test_goal_referencing_absent_object():
    dom = simple_domain(1)
    with pytest.raises(NoSkeleton):
        enumerate_skeletons(dom, goal_on(("ghost", "tray")), max_len=8, k=10)


def test_unsatisfiable_within_bound():
    dom = simple_domain(2, surfaces=("tray",))
    goal = goal_on(("obj0", "tray"), ("obj1", "tray"))
    with pytest.raises(NoSkeleton):
        enumerate_skeletons(dom, goal, max_len=4, k=10)


def test_wipe_skeleton_requires_eraser():
    dom = Domain(("sponge",), ("sponge", "board"), frozenset({"sponge"}),
                 make_state({"sponge": TABLE, "board": TABLE}))
    goal = GoalSpec((Predicate("IsCleaned", ("board",)),))
    skels = enumerate_skeletons(dom, goal, max_len=8, k=10)
    assert [a.name for a in skels[0].actions] == ["MoveFree", "Pick", "MoveHolding", "Wipe"]
    no_eraser = Domain(("sponge",), ("sponge", "board"), frozenset(),
                       make_state({"sponge": TABLE, "board": TABLE}))
    with pytest.raises(NoSkeleton):
        enumerate_skeletons(no_eraser, goal, max_len=8, k=10)


def test_enumeration_matches_bfs_oracle_on_random_domains():
    rng = np.random.default_rng(31)
    for trial in range(30):
        n_obj = int(rng.integers(1, 4))
        n_surf = int(rng.integers(1, 3))
        movables = tuple(f"o{i}" for i in range(n_obj))
        surfaces = tuple(f"s{i}" for i in range(n_surf))
        placement = {m: (TABLE if rng.random() < 0.7 else surfaces[0])
                     for m in movables}
        erasers = frozenset(m for m in movables if rng.random() < 0.2)
        dom = Domain(movables, movables + surfaces, erasers, make_state(placement))
        preds = []
        for m in movables[: int(rng.integers(1, n_obj + 1))]:
            target = surfaces[int(rng.integers(0, n_surf))]
            preds.append(Predicate("On", (m, target)))
        goal = GoalSpec(tuple(preds))
        max_len = 8
        oracle = {tuple(seq) for seq in bfs_all_plans(dom, goal, max_len)}
        try:
            skels = enumerate_skeletons(dom, goal, max_len=max_len, k=10_000)
            got = {s.macros for s in skels}
        except NoSkeleton:
            got = set()
        assert got == oracle, f"trial {trial}"


def test_caching_transparency():
    dom = Domain(("a", "b"), ("a", "b", "s0"), frozenset(),
                 make_state({"a": TABLE, "b": "s0"}))
    goal = goal_on(("a", "s0"), ("b", TABLE))
    with_cache = enumerate_skeletons(dom, goal, max_len=10, k=500, use_cache=True)
    without = enumerate_skeletons(dom, goal, max_len=10, k=500, use_cache=False)
    assert [s.macros for s in with_cache] == [s.macros for s in without]


def test_every_skeleton_replays_to_goal():
    dom = Domain(("a", "b", "c"), ("a", "b", "c", "bin"), frozenset(),
                 make_state({"a": TABLE, "b": TABLE, "c": TABLE}))
    goal = goal_on(("a", "bin"), ("b", "bin"))
    skels = enumerate_skeletons(dom, goal, max_len=12, k=300)
    assert skels
    for s in skels:
        final = replay(s.macros, dom)
        assert final is not None
        assert goal_satisfied(final, goal, dom)


def test_pick_blocked_under_stacked_object():
    dom = Domain(("a", "b"), ("a", "b", "tray"), frozenset(),
                 make_state({"a": TABLE, "b": "a"}))  # b rests on a
    succ = successors(dom.initial, dom)
    picked = [m[1] for m, _ in succ if m[0] == "pick"]
    assert picked == ["b"], "a supports b and must not be liftable first"
