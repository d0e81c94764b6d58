"""Two-stage simulated-annealing search with a buffer-allocation outer loop.

Stage 1 varies the fusion attributes (order, cuts, tilings) while the
load/store side stays on the classical double-buffer policy; stage 2 freezes
the winning fusion structure and re-times the DRAM tensors (order, living
durations). The outer loop re-runs both stages while squeezing stage 1's
buffer budget, trading fusion footprint for prefetch headroom, and keeps the
best overall scheme. A restricted baseline searcher (order and DRAM cuts
only, parallelism-driven tilings, fusion cuts identical to DRAM cuts) is
included for comparisons.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .evaluator import EvalReport, HardwareConfig, cost, simulate
from .model import ModelGraph
from .notation import (ExecutionPlan, ScheduleEncoding, apply_dlsa,
                       double_buffer_dlsa, initial_encoding, parse_lfa)
from .tiling import max_tiling_number

LFA_MOVE_KINDS = ("order", "tiling", "flc", "dram_cut")
DLSA_MOVE_KINDS = ("order", "duration")

# Stage-2 chains are given 10x the per-element iteration budget of stage 1
# (DRAM tensor moves are much cheaper to evaluate than full re-parses).
DLSA_BETA_FACTOR = 10


@dataclass
class SAParams:
    t0: float = 0.5
    alpha: float = 2.0
    beta: float = 100.0
    wall_clock_limit: Optional[float] = None   # seconds
    post_limit_iters: int = 1000               # greedy-only iterations after the limit
    seed: int = 0

    def __post_init__(self):
        if self.t0 <= 0:
            raise ValueError("t0 must be > 0")
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        if self.post_limit_iters < 0:
            raise ValueError("post_limit_iters must be >= 0")


@dataclass
class AllocatorParams:
    shrink_percent: float = 0.10
    n: float = 1.0
    m: float = 1.0
    stop_after: int = 2    # consecutive non-improving outer iterations

    def __post_init__(self):
        if not 0 < self.shrink_percent < 1:
            raise ValueError("shrink_percent must be in (0, 1)")
        if self.stop_after < 1:
            raise ValueError("stop_after must be >= 1")


@dataclass
class LogEntry:
    stage: str
    iteration: int
    temperature: float
    cost: float
    accepted: bool
    best_cost: float


@dataclass
class SearchState:
    best_encoding: ScheduleEncoding
    best_plan: Optional[ExecutionPlan]
    best_report: Optional[EvalReport]
    best_cost: float
    current_encoding: ScheduleEncoding
    current_cost: float
    buffer_max: int = 0
    iterations: int = 0
    evaluations: int = 0
    log: list[LogEntry] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.best_cost)


def sa_temperature(n: int, total: int, t0: float, alpha: float) -> float:
    """Cooling schedule T0 * (1 - n/N) / (1 + alpha * n/N)."""
    frac = n / total
    return t0 * (1.0 - frac) / (1.0 + alpha * frac)


def sa_accept(c: float, c_new: float, temperature: float, rng: random.Random) -> bool:
    """Metropolis-style rule with explicit handling of infinite costs."""
    if math.isinf(c_new):
        return math.isinf(c)      # never step from a feasible point to an infeasible one
    if math.isinf(c):
        return True
    if c_new <= c:
        return True
    if temperature <= 0 or c <= 0:
        return False
    return rng.random() < math.exp((c - c_new) / (c * temperature))


# --------------------------------------------------------------------------
# Stage-1 move operators
# --------------------------------------------------------------------------

def _pow2_clamp(value: int, bound: int) -> int:
    while value > bound:
        value //= 2
    return max(value, 1)


def _clamped_tilings(g: ModelGraph, order: tuple[int, ...], flc: frozenset[int],
                     tilings: tuple[int, ...]) -> tuple[int, ...]:
    enc = ScheduleEncoding(order, flc, tilings, frozenset())
    out = []
    for (lo, hi), t in zip(enc.flg_ranges(), tilings):
        layers = [g.layer(order[i]) for i in range(lo, hi)]
        out.append(_pow2_clamp(t, max_tiling_number(layers)))
    return tuple(out)


def _move_order(g: ModelGraph, enc: ScheduleEncoding, rng: random.Random):
    order = list(enc.computing_order)
    if len(order) < 2:
        return None
    layer_id = order[rng.randrange(len(order))]
    layer = g.layer(layer_id)
    rest = [lid for lid in order if lid != layer_id]
    succs = set(g.successors(layer_id))
    lo = 0
    for i, lid in enumerate(rest):
        if lid in layer.predecessors:
            lo = i + 1
    hi = len(rest)
    for i, lid in enumerate(rest):
        if lid in succs:
            hi = i
            break
    slots = list(range(lo, hi + 1))
    original = order.index(layer_id)
    if slots == [original]:
        return None
    slot = slots[rng.randrange(len(slots))]
    new_order = tuple(rest[:slot] + [layer_id] + rest[slot:])
    if new_order == enc.computing_order:
        return None
    tilings = _clamped_tilings(g, new_order, enc.flc_set, enc.tiling_numbers)
    return replace(enc, computing_order=new_order, tiling_numbers=tilings,
                   dram_tensor_order=None, living_durations=None)


def _move_tiling(g: ModelGraph, enc: ScheduleEncoding, rng: random.Random):
    ranges = enc.flg_ranges()
    fi = rng.randrange(len(ranges))
    lo, hi = ranges[fi]
    layers = [g.layer(enc.computing_order[i]) for i in range(lo, hi)]
    t = enc.tiling_numbers[fi]
    if rng.random() < 0.5:
        new_t = t * 2
        if new_t > max_tiling_number(layers):
            return None
    else:
        new_t = t // 2
        if new_t < 1:
            return None
    tilings = enc.tiling_numbers[:fi] + (new_t,) + enc.tiling_numbers[fi + 1:]
    return replace(enc, tiling_numbers=tilings,
                   dram_tensor_order=None, living_durations=None)


def _move_flc(g: ModelGraph, enc: ScheduleEncoding, rng: random.Random):
    n = len(enc.computing_order)
    addable = sorted(set(range(1, n)) - enc.flc_set)
    deletable = sorted(enc.flc_set - enc.dram_cut_set)
    want_add = rng.random() < 0.5
    if want_add and not addable:
        want_add = False
    if not want_add and not deletable:
        want_add = True
    if want_add:
        if not addable:
            return None
        pos = addable[rng.randrange(len(addable))]
        cuts = sorted(enc.flc_set)
        fi = sum(1 for c in cuts if c < pos)      # group being split
        tilings = (enc.tiling_numbers[:fi] + (enc.tiling_numbers[fi],)
                   + enc.tiling_numbers[fi:])
        return replace(enc, flc_set=enc.flc_set | {pos}, tiling_numbers=tilings,
                       dram_tensor_order=None, living_durations=None)
    if not deletable:
        return None
    pos = deletable[rng.randrange(len(deletable))]
    cuts = sorted(enc.flc_set)
    fi = cuts.index(pos)                          # merge groups fi and fi+1
    new_flc = enc.flc_set - {pos}
    ranges = enc.flg_ranges()
    size_a = ranges[fi][1] - ranges[fi][0]
    size_b = ranges[fi + 1][1] - ranges[fi + 1][0]
    # Merged tiling inherited with probability proportional to layer counts.
    if rng.random() < size_a / (size_a + size_b):
        merged = enc.tiling_numbers[fi]
    else:
        merged = enc.tiling_numbers[fi + 1]
    tilings = enc.tiling_numbers[:fi] + (merged,) + enc.tiling_numbers[fi + 2:]
    tilings = _clamped_tilings(g, enc.computing_order, new_flc, tilings)
    return replace(enc, flc_set=new_flc, tiling_numbers=tilings,
                   dram_tensor_order=None, living_durations=None)


def _move_dram_cut(g: ModelGraph, enc: ScheduleEncoding, rng: random.Random):
    addable = sorted(enc.flc_set - enc.dram_cut_set)   # must already be an FLC
    deletable = sorted(enc.dram_cut_set)
    want_add = rng.random() < 0.5
    if want_add and not addable:
        want_add = False
    if not want_add and not deletable:
        want_add = True
    pool = addable if want_add else deletable
    if not pool:
        return None
    pos = pool[rng.randrange(len(pool))]
    cuts = enc.dram_cut_set | {pos} if want_add else enc.dram_cut_set - {pos}
    return replace(enc, dram_cut_set=cuts,
                   dram_tensor_order=None, living_durations=None)


_LFA_MOVES: dict[str, Callable] = {
    "order": _move_order,
    "tiling": _move_tiling,
    "flc": _move_flc,
    "dram_cut": _move_dram_cut,
}


def propose_lfa_move(g: ModelGraph, enc: ScheduleEncoding, kind: str,
                     rng: random.Random) -> tuple[ScheduleEncoding, bool]:
    """Apply one fusion-attribute operator; returns (encoding, moved flag).

    The result always satisfies validate_encoding; inapplicable moves return
    the input unchanged with moved=False.
    """
    if kind not in _LFA_MOVES:
        raise ValueError(f"unknown move kind {kind!r}")
    out = _LFA_MOVES[kind](g, enc, rng)
    if out is None:
        return enc, False
    return out, True


# --------------------------------------------------------------------------
# Stage-2 move operators
# --------------------------------------------------------------------------

def _pick_tensor_by_size(plan: ExecutionPlan, rng: random.Random) -> int:
    """Index into plan.dram_tensors, probability proportional to byte size."""
    total = sum(t.bytes for t in plan.dram_tensors)
    r = rng.random() * total
    acc = 0
    for i, t in enumerate(plan.dram_tensors):
        acc += t.bytes
        if r < acc:
            return i
    return len(plan.dram_tensors) - 1


def propose_dlsa_move(plan: ExecutionPlan, kind: str,
                      rng: random.Random) -> tuple[ExecutionPlan, bool]:
    """Re-time one DRAM tensor: move it in the order or resample its duration.

    Tensor selection is size-proportional. The result always satisfies the
    fixed-bound rules; whether the new order is serviceable is decided
    dynamically by the simulator (deadlocks cost infinity).
    """
    if kind not in DLSA_MOVE_KINDS:
        raise ValueError(f"unknown move kind {kind!r}")
    tensors = plan.dram_tensors
    if not tensors:
        return plan, False
    idx = _pick_tensor_by_size(plan, rng)
    chosen = tensors[idx]
    order = [t.id for t in tensors]
    durations = {t.id: (t.start, t.end) for t in tensors}
    if kind == "order":
        if len(tensors) < 2:
            return plan, False
        slots = [i for i in range(len(tensors)) if i != idx]
        slot = slots[rng.randrange(len(slots))]
        order.pop(idx)
        order.insert(slot, chosen.id)
        return apply_dlsa(plan, order, durations), True
    if chosen.is_load:
        lo, hi = 0, chosen.first_consumer
        new_start = rng.randint(lo, hi)
        if new_start == chosen.start:
            return plan, False
        durations[chosen.id] = (new_start, chosen.end)
    else:
        lo, hi = chosen.producer_tile + 1, plan.end_marker
        new_end = rng.randint(lo, hi)
        if new_end == chosen.end:
            return plan, False
        durations[chosen.id] = (chosen.start, new_end)
    return apply_dlsa(plan, order, durations), True


# --------------------------------------------------------------------------
# SA driver
# --------------------------------------------------------------------------

def _run_sa(initial_cost: float, n_iters: int, params: SAParams, stage: str,
            propose: Callable[[random.Random], tuple[object, float, object, object]],
            commit: Callable[[object, object, object], None],
            log: list[LogEntry]) -> tuple[float, float, int]:
    """Generic annealing loop over an externally-held current/best state.

    `propose` draws a candidate and returns (candidate, cost, plan, report);
    `commit` installs an accepted candidate as current. Returns
    (current_cost, best_cost, evaluations). Wall-clock expiry switches to
    greedy-only acceptance for params.post_limit_iters iterations.
    """
    rng = random.Random(params.seed)
    current_cost = initial_cost
    best_cost = initial_cost
    start_time = time.monotonic()
    greedy_left = None
    evaluations = 0
    for it in range(n_iters):
        if greedy_left is None and params.wall_clock_limit is not None \
                and time.monotonic() - start_time > params.wall_clock_limit:
            greedy_left = params.post_limit_iters
        if greedy_left is not None:
            if greedy_left == 0:
                break
            greedy_left -= 1
        temperature = sa_temperature(it, n_iters, params.t0, params.alpha)
        candidate, cand_cost, plan, report = propose(rng)
        if candidate is None:     # inapplicable move
            log.append(LogEntry(stage, it, temperature, current_cost, False, best_cost))
            continue
        evaluations += 1
        if greedy_left is not None:
            accepted = cand_cost < current_cost
        else:
            accepted = sa_accept(current_cost, cand_cost, temperature, rng)
        if accepted:
            commit(candidate, plan, report)
            current_cost = cand_cost
        best_cost = min(best_cost, cand_cost)
        log.append(LogEntry(stage, it, temperature, cand_cost, accepted, best_cost))
    return current_cost, best_cost, evaluations


def stage1_explore(g: ModelGraph, hw: HardwareConfig, budget_bytes: int,
                   params: SAParams, objective: tuple[float, float] = (1.0, 1.0),
                   stage_label: str = "lfa") -> SearchState:
    """Anneal the fusion attributes under a buffer budget.

    Every candidate is parsed, double-buffered, and simulated; schemes whose
    occupancy exceeds the budget (or that cannot be scheduled) cost infinity.
    """
    n_exp, m_exp = objective

    def evaluate(enc: ScheduleEncoding):
        plan = double_buffer_dlsa(parse_lfa(g, enc))
        report = simulate(plan, hw, budget_bytes)
        return cost(report, n_exp, m_exp), plan, report

    enc0 = initial_encoding(g)
    cost0, plan0, report0 = evaluate(enc0)
    state = SearchState(best_encoding=enc0, best_plan=plan0, best_report=report0,
                        best_cost=cost0, current_encoding=enc0, current_cost=cost0)
    state.evaluations = 1
    n_iters = max(1, int(params.beta * len(g.layers)))
    rng_kind = random.Random(params.seed ^ 0x5EED)

    def propose(rng: random.Random):
        kinds = [k for k in LFA_MOVE_KINDS
                 if not (k == "order" and len(g.layers) < 2)
                 and not (k in ("flc", "dram_cut") and len(g.layers) < 2)]
        kind = kinds[rng_kind.randrange(len(kinds))]
        cand, moved = propose_lfa_move(g, state.current_encoding, kind, rng)
        if not moved:
            return None, math.inf, None, None
        c, plan, report = evaluate(cand)
        if c < state.best_cost:
            state.best_encoding, state.best_plan, state.best_report = cand, plan, report
            state.best_cost = c
        return cand, c, plan, report

    def commit(cand, plan, report):
        state.current_encoding = cand

    current, best, evals = _run_sa(cost0, n_iters, params, stage_label,
                                   propose, commit, state.log)
    state.current_cost = current
    state.best_cost = best
    state.iterations = n_iters
    state.evaluations += evals
    if state.best_report is not None and state.best_report.valid:
        state.buffer_max = state.best_report.peak_buffer_bytes
    return state


def stage2_explore(state: SearchState, hw: HardwareConfig, budget_bytes: int,
                   params: SAParams, objective: tuple[float, float] = (1.0, 1.0),
                   stage_label: str = "dlsa") -> SearchState:
    """Anneal DRAM tensor order and living durations; fusion side is frozen."""
    if state.best_plan is None or not state.feasible:
        return state
    n_exp, m_exp = objective
    base_plan = state.best_plan
    base_report = simulate(base_plan, hw, budget_bytes)
    base_cost = cost(base_report, n_exp, m_exp)

    out = SearchState(best_encoding=base_plan.encoding, best_plan=base_plan,
                      best_report=base_report, best_cost=base_cost,
                      current_encoding=base_plan.encoding, current_cost=base_cost,
                      buffer_max=state.buffer_max, log=list(state.log))
    out.evaluations = state.evaluations + 1
    current_plan = base_plan
    n_iters = max(1, int(params.beta * len(base_plan.dram_tensors)))
    rng_kind = random.Random(params.seed ^ 0xD15A)

    def propose(rng: random.Random):
        kind = DLSA_MOVE_KINDS[rng_kind.randrange(len(DLSA_MOVE_KINDS))]
        cand_plan, moved = propose_dlsa_move(current_plan, kind, rng)
        if not moved:
            return None, math.inf, None, None
        report = simulate(cand_plan, hw, budget_bytes)
        c = cost(report, n_exp, m_exp)
        if c < out.best_cost:
            out.best_encoding, out.best_plan, out.best_report = \
                cand_plan.encoding, cand_plan, report
            out.best_cost = c
        return cand_plan, c, cand_plan, report

    def commit(cand_plan, plan, report):
        nonlocal current_plan
        current_plan = cand_plan

    current, best, evals = _run_sa(base_cost, n_iters, params, stage_label,
                                   propose, commit, out.log)
    out.current_encoding = current_plan.encoding
    out.current_cost = current
    out.best_cost = best
    out.iterations = state.iterations + n_iters
    out.evaluations += evals
    return out


def buffer_allocator_loop(g: ModelGraph, hw: HardwareConfig,
                          alloc: AllocatorParams, sa: SAParams) -> SearchState:
    """Outer loop: shrink stage-1's buffer limit stepwise, keep the best.

    Iteration 1 gives both stages the full buffer. Later iterations cap
    stage 1 at buffer_max minus k-1 shrink steps (stage 2 keeps the full
    buffer) and stop after `alloc.stop_after` consecutive non-improvements or
    when the cap reaches zero.
    """
    seeder = random.Random(sa.seed)

    def stage_params(beta_scale: float = 1.0) -> SAParams:
        return replace(sa, seed=seeder.getrandbits(32),
                       beta=sa.beta * beta_scale)

    objective = (alloc.n, alloc.m)
    s1 = stage1_explore(g, hw, hw.gbuf_bytes, stage_params(), objective,
                        stage_label="lfa-1")
    if not s1.feasible:
        return s1
    best = stage2_explore(s1, hw, hw.gbuf_bytes, stage_params(DLSA_BETA_FACTOR),
                          objective, stage_label="dlsa-1")
    buffer_max = s1.buffer_max
    best.buffer_max = buffer_max

    strikes = 0
    k = 2
    while strikes < alloc.stop_after:
        limit = buffer_max - (k - 1) * alloc.shrink_percent * buffer_max
        if limit <= 0:
            break
        limit = min(int(limit), hw.gbuf_bytes)
        s1k = stage1_explore(g, hw, limit, stage_params(), objective,
                             stage_label=f"lfa-{k}")
        if s1k.feasible:
            s2k = stage2_explore(s1k, hw, hw.gbuf_bytes,
                                 stage_params(DLSA_BETA_FACTOR), objective,
                                 stage_label=f"dlsa-{k}")
            cost_temp = s2k.best_cost
        else:
            s2k = s1k
            cost_temp = math.inf
        best.log.extend(s2k.log)
        best.evaluations += s2k.evaluations
        best.iterations += s2k.iterations
        if cost_temp < best.best_cost:
            best.best_encoding = s2k.best_encoding
            best.best_plan = s2k.best_plan
            best.best_report = s2k.best_report
            best.best_cost = cost_temp
            best.current_encoding = s2k.current_encoding
            best.current_cost = s2k.current_cost
            strikes = 0
        else:
            strikes += 1
        k += 1
    return best


# --------------------------------------------------------------------------
# Restricted baseline: order and DRAM cuts only
# --------------------------------------------------------------------------

def kc_tiling_number(flg_layers, hw: HardwareConfig) -> int:
    """Parallelism-driven tiling: finer for larger kernel/channel work.

    The per-position channel/kernel workload (in array rounds) sets the tile
    count, clamped to what the group's fmaps can actually be split into.
    """
    demand = 1
    for l in flg_layers:
        rounds = (math.ceil(l.out_channels / hw.parallel_k)
                  * math.ceil(l.in_channels / hw.parallel_c)
                  * l.kernel_h * l.kernel_w)
        demand = max(demand, rounds)
    t = 1
    while t * 2 <= demand:
        t *= 2
    return _pow2_clamp(t, max_tiling_number(flg_layers))


def _baseline_tilings(g: ModelGraph, order: tuple[int, ...],
                      cuts: frozenset[int], hw: HardwareConfig) -> tuple[int, ...]:
    enc = ScheduleEncoding(order, cuts, (1,) * (len(cuts) + 1), cuts)
    out = []
    for lo, hi in enc.flg_ranges():
        layers = [g.layer(order[i]) for i in range(lo, hi)]
        out.append(kc_tiling_number(layers, hw))
    return tuple(out)


def baseline_schedule(g: ModelGraph, hw: HardwareConfig, params: SAParams,
                      objective: tuple[float, float] = (1.0, 1.0)) -> SearchState:
    """Search restricted to computing order and DRAM cuts.

    Fusion cuts mirror the DRAM cuts exactly, tilings follow the parallelism
    heuristic, and the load/store side stays on double buffering.
    """
    n_exp, m_exp = objective

    def with_tilings(order, cuts) -> ScheduleEncoding:
        return ScheduleEncoding(order, cuts, _baseline_tilings(g, order, cuts, hw),
                                cuts)

    def evaluate(enc: ScheduleEncoding):
        plan = double_buffer_dlsa(parse_lfa(g, enc))
        report = simulate(plan, hw, hw.gbuf_bytes)
        return cost(report, n_exp, m_exp), plan, report

    order0 = initial_encoding(g).computing_order
    enc0 = with_tilings(order0, frozenset(range(1, len(order0))))
    cost0, plan0, report0 = evaluate(enc0)
    state = SearchState(best_encoding=enc0, best_plan=plan0, best_report=report0,
                        best_cost=cost0, current_encoding=enc0, current_cost=cost0)
    state.evaluations = 1
    n_iters = max(1, int(params.beta * len(g.layers)))
    rng_kind = random.Random(params.seed ^ 0xBA5E)

    def propose(rng: random.Random):
        cur = state.current_encoding
        if len(g.layers) < 2:
            return None, math.inf, None, None
        if rng_kind.random() < 0.5:
            moved_enc, moved = propose_lfa_move(g, cur, "order", rng)
            if not moved:
                return None, math.inf, None, None
            cand = with_tilings(moved_enc.computing_order, cur.dram_cut_set)
        else:
            n = len(g.layers)
            addable = sorted(set(range(1, n)) - cur.dram_cut_set)
            deletable = sorted(cur.dram_cut_set)
            want_add = rng.random() < 0.5
            if want_add and not addable:
                want_add = False
            if not want_add and not deletable:
                want_add = True
            pool = addable if want_add else deletable
            if not pool:
                return None, math.inf, None, None
            pos = pool[rng.randrange(len(pool))]
            cuts = cur.dram_cut_set | {pos} if want_add else cur.dram_cut_set - {pos}
            cand = with_tilings(cur.computing_order, cuts)
        c, plan, report = evaluate(cand)
        if c < state.best_cost:
            state.best_encoding, state.best_plan, state.best_report = cand, plan, report
            state.best_cost = c
        return cand, c, plan, report

    def commit(cand, plan, report):
        state.current_encoding = cand

    current, best, evals = _run_sa(cost0, n_iters, params, "baseline",
                                   propose, commit, state.log)
    state.current_cost = current
    state.best_cost = best
    state.iterations = n_iters
    state.evaluations += evals
    if state.best_report is not None and state.best_report.valid:
        state.buffer_max = state.best_report.peak_buffer_bytes
    return state
