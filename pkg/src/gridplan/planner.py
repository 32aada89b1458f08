"""Search over process grids and per-layer roles, ranked by time per epoch."""

from __future__ import annotations

import csv
import enum
import io
import itertools
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

from .costmodel import (
    ALLREDUCE_DATA,
    ALLREDUCE_WEIGHTS,
    BACKWARD,
    Assignment,
    CostBreakdown,
    GridConfig,
    HardwareModel,
    cost_batch_parallel,
    cost_integrated,
)
from .netspec import NetworkSpec

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["P", "p_r", "p_c", "policy", "t_comm_s", "t_comp_s", "t_total_s", "speedup", "feasible"]

# fraction of an iteration's compute spent in backprop (two of the three products)
BACKPROP_COMPUTE_SHARE = 2.0 / 3.0


class Policy(enum.Enum):
    ALL_MODEL = "all-model"
    CONV_BATCH_FC_MODEL = "conv-batch-fc-model"
    CONV_DOMAIN_FC_MODEL = "conv-domain-fc-model"
    EXHAUSTIVE = "exhaustive"


PURE_BATCH = "pure-batch"


class Overlap(enum.Enum):
    NONE = "none"
    BACKPROP = "backprop"


class NoFeasiblePlan(RuntimeError):
    pass


@dataclass(frozen=True)
class PlanQuery:
    net: NetworkSpec
    hw: HardwareModel
    P: int
    B: int
    policy: Policy = Policy.CONV_BATCH_FC_MODEL
    overlap: Overlap = Overlap.NONE
    max_batch_per_process: Optional[int] = None
    exhaustive_cap: int = 4096

    def __post_init__(self):
        if self.P < 1 or self.B < 1:
            raise ValueError("P and B must be >= 1")
        if self.max_batch_per_process is not None and self.max_batch_per_process < 1:
            raise ValueError("max_batch_per_process must be >= 1")


@dataclass(frozen=True)
class PlanResult:
    grid: GridConfig
    policy: str
    t_comm: float
    t_comp: float
    t_total: float
    speedup_vs_pure_batch: float
    breakdown: CostBreakdown
    feasible: bool = True

    def csv_row(self) -> list:
        return [
            self.grid.p, self.grid.p_r, self.grid.p_c, self.policy,
            _fmt(self.t_comm), _fmt(self.t_comp), _fmt(self.t_total),
            _fmt(self.speedup_vs_pure_batch), "true" if self.feasible else "false",
        ]


def _fmt(x: float) -> str:
    return repr(float(x))


def divisor_pairs(P: int) -> list:
    return [(r, P // r) for r in range(1, P + 1) if P % r == 0]


def _roles(net: NetworkSpec, policy: Policy, cap: int) -> list:
    conv = [d.is_conv for d in net.dims]
    if policy is Policy.ALL_MODEL:
        return [tuple(Assignment.MODEL for _ in conv)]
    if policy is Policy.CONV_BATCH_FC_MODEL:
        return [tuple(Assignment.BATCH if c else Assignment.MODEL for c in conv)]
    if policy is Policy.CONV_DOMAIN_FC_MODEL:
        return [tuple(Assignment.DOMAIN if c else Assignment.MODEL for c in conv)]
    choices = [(Assignment.MODEL, Assignment.DOMAIN) if c else (Assignment.MODEL,) for c in conv]
    combos = list(itertools.islice(itertools.product(*choices), cap))
    total = math.prod(len(c) for c in choices)
    if total > cap:
        logger.warning("exhaustive search truncated to %d of %d assignments", cap, total)
    return combos


def enumerate_grids(P: int, policy: Policy, net: NetworkSpec, exhaustive_cap: int = 4096) -> list:
    """All ``p_r x p_c = P`` factorisations, each with the policy's layer roles."""
    if P < 1:
        raise ValueError("P must be >= 1")
    roles = _roles(net, policy, exhaustive_cap)
    return [GridConfig(p_r, p_c, a) for p_r, p_c in divisor_pairs(P) for a in roles]


def pure_batch_grid(net: NetworkSpec, P: int) -> GridConfig:
    return GridConfig(1, P, (Assignment.BATCH,) * len(net.dims))


def is_feasible(net: NetworkSpec, grid: GridConfig, B: int) -> bool:
    """Every process needs at least one sample, or one image slab at least a halo thick."""
    for dims, role in zip(net.dims, grid.effective_assignment()):
        if role is Assignment.BATCH and B < grid.p:
            return False
        if role is Assignment.MODEL and B < grid.p_c:
            return False
        if role is Assignment.DOMAIN:
            if B < grid.p_c:
                return False
            slab = dims.x_h / grid.p_r
            if slab < 1 or slab < dims.kernel_h // 2:
                return False
    return True


@dataclass(frozen=True)
class _Eval:
    grid: GridConfig
    t_comm: float
    t_comp: float
    t_total: float
    breakdown: CostBreakdown
    feasible: bool


def _iterations(net: NetworkSpec, B: int) -> int:
    return math.ceil(net.sample_count / B)


def _evaluate(net, hw, grid, B, overlap, breakdown=None) -> _Eval:
    bd = breakdown if breakdown is not None else cost_integrated(net, grid, B, hw)
    iters = _iterations(net, B)
    comm_iter = bd.to_seconds(hw)
    comp_iter = hw.compute.iteration_time(net, grid, B) if hw.compute is not None else 0.0
    t_comm = iters * comm_iter
    t_comp = iters * comp_iter
    t_total = t_comm + t_comp
    if overlap is Overlap.BACKPROP:
        hidden_comm = sum(
            r.seconds(hw)
            for r in bd.records
            if r.phase == BACKWARD and r.kind in (ALLREDUCE_DATA, ALLREDUCE_WEIGHTS)
        )
        t_total -= iters * min(hidden_comm, BACKPROP_COMPUTE_SHARE * comp_iter)
    return _Eval(grid, t_comm, t_comp, t_total, bd, is_feasible(net, grid, B))


def _workers() -> int:
    raw = os.environ.get("GRIDPLAN_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _evaluate_all(net, hw, grids, B, overlap) -> list:
    workers = min(_workers(), max(1, len(grids)))
    if workers == 1:
        return [_evaluate(net, hw, g, B, overlap) for g in grids]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # map preserves input order, so output matches the sequential path
        return list(pool.map(lambda g: _evaluate(net, hw, g, B, overlap), grids))


def _sort_key(item):
    index, ev = item
    # ties: more batch parallelism first, then fewer rows, then enumeration order
    return (ev.t_total, -ev.grid.p_c, ev.grid.p_r, index)


def _reference(net, hw, P, B, overlap) -> _Eval:
    grid = pure_batch_grid(net, P)
    return _evaluate(net, hw, grid, B, overlap, cost_batch_parallel(net, P, hw))


def _results(query: PlanQuery, evals, ref: _Eval, policy_name: str) -> list:
    ranked = sorted(enumerate(evals), key=_sort_key)
    out = []
    for _, ev in ranked:
        speedup = ref.t_total / ev.t_total if ev.t_total > 0 else 1.0
        out.append(
            PlanResult(ev.grid, policy_name, ev.t_comm, ev.t_comp, ev.t_total,
                       speedup, ev.breakdown, ev.feasible)
        )
    return out


def _candidate_evals(query: PlanQuery) -> list:
    grids = enumerate_grids(query.P, query.policy, query.net, query.exhaustive_cap)
    if query.max_batch_per_process is not None:
        grids = [g for g in grids if query.B / g.p_c <= query.max_batch_per_process]
    return _evaluate_all(query.net, query.hw, grids, query.B, query.overlap)


def plan(query: PlanQuery) -> list:
    """Feasible configurations for ``query``, fastest epoch first.

    Times are per epoch: per-iteration costs times ``ceil(N / B)``. The
    speedup column is relative to pure batch parallelism on a ``1 x P`` grid.
    """
    evals = [ev for ev in _candidate_evals(query) if ev.feasible]
    if not evals:
        raise NoFeasiblePlan(
            f"no feasible configuration for P={query.P}, B={query.B}, policy={query.policy.value}"
        )
    ref = _reference(query.net, query.hw, query.P, query.B, query.overlap)
    return _results(query, evals, ref, query.policy.value)


def sweep_strong(net, hw, B, P_list, policy, overlap=Overlap.NONE, max_batch_per_process=None) -> list:
    """One ranked result list per P at a fixed global batch ``B``."""
    table = []
    for P in P_list:
        q = PlanQuery(net, hw, P, B, policy, overlap, max_batch_per_process)
        table.append((P, B, plan(q)))
    return table


def sweep_weak(net, hw, P_list, B_list, policy, overlap=Overlap.NONE, max_batch_per_process=None) -> list:
    """Like :func:`sweep_strong` but ``P`` and ``B`` vary together, pairwise."""
    if len(P_list) != len(B_list):
        raise ValueError("weak scaling needs one batch size per process count")
    if not B_list:
        raise ValueError("weak scaling needs a non-empty batch list")
    table = []
    for P, B in zip(P_list, B_list):
        q = PlanQuery(net, hw, P, B, policy, overlap, max_batch_per_process)
        table.append((P, B, plan(q)))
    return table


def sweep_beyond_batch(net, hw, B, P_list, policy=Policy.CONV_DOMAIN_FC_MODEL, overlap=Overlap.NONE) -> list:
    """Scaling past ``P = B``: every grid is listed with a feasibility flag.

    The pure batch ``1 x P`` configuration is always included so its
    infeasibility at ``P > B`` shows up in the table.
    """
    table = []
    for P in P_list:
        q = PlanQuery(net, hw, P, B, policy, overlap)
        ref = _reference(net, hw, P, B, overlap)
        evals = _candidate_evals(q)
        rows = _results(q, evals, ref, policy.value)
        ref_row = _results(q, [ref], ref, PURE_BATCH)
        feasible = [r for r in rows if r.feasible]
        infeasible = [r for r in rows if not r.feasible]
        table.append((P, B, ref_row + feasible + infeasible))
    return table


def sweep_to_csv(table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for _P, _B, results in table:
        for r in results:
            writer.writerow(r.csv_row())
    return buf.getvalue()


def results_to_csv(results: Sequence[PlanResult]) -> str:
    return sweep_to_csv([(None, None, results)])
