"""Shared generators for randomized plan-level tests."""

import random

from soma.explorer import propose_dlsa_move
from soma.model import ModelGraph
from soma.notation import (ExecutionPlan, ScheduleEncoding, double_buffer_dlsa,
                           parse_lfa)
from soma.tiling import max_tiling_number

TILING_CHOICES = (1, 2, 4, 8)


def random_topological_order(g: ModelGraph, rng: random.Random) -> tuple[int, ...]:
    remaining = {l.id: set(l.predecessors) for l in g.layers}
    order = []
    while remaining:
        ready = sorted(i for i, deps in remaining.items() if not deps)
        pick = ready[rng.randrange(len(ready))]
        order.append(pick)
        del remaining[pick]
        for deps in remaining.values():
            deps.discard(pick)
    return tuple(order)


def random_encoding(g: ModelGraph, rng: random.Random) -> ScheduleEncoding:
    order = random_topological_order(g, rng)
    n = len(order)
    flc = frozenset(p for p in range(1, n) if rng.random() < 0.5)
    dram = frozenset(p for p in flc if rng.random() < 0.5)
    skeleton = ScheduleEncoding(order, flc, (1,) * (len(flc) + 1), dram)
    tilings = []
    for lo, hi in skeleton.flg_ranges():
        layers = [g.layer(order[i]) for i in range(lo, hi)]
        cap = max_tiling_number(layers)
        choices = [t for t in TILING_CHOICES if t <= cap]
        tilings.append(choices[rng.randrange(len(choices))])
    return ScheduleEncoding(order, flc, tuple(tilings), dram)


def random_plan(g: ModelGraph, rng: random.Random,
                perturb_moves: int = 6) -> ExecutionPlan:
    """Random encoding, double-buffered, then a few random DLSA moves.

    Order moves may produce unserviceable plans; callers that need valid
    plans should simulate and filter.
    """
    plan = double_buffer_dlsa(parse_lfa(g, random_encoding(g, rng)))
    for _ in range(rng.randrange(perturb_moves + 1)):
        kind = ("order", "duration")[rng.randrange(2)]
        plan, _ = propose_dlsa_move(plan, kind, rng)
    return plan
