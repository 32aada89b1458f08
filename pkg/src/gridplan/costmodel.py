"""Alpha-beta communication costs for batch, model, domain and 1.5D parallelism.

Every cost function returns a :class:`CostBreakdown`: a list of records, one
per (layer, collective), each holding a count of latency units (multiples of
alpha) and a count of words (multiples of beta). ``to_seconds`` applies a
:class:`HardwareModel`.

Conventions used throughout:

* ``ceil(log P)`` is base 2 and is 0 for ``P == 1``.
* The all-reduce latency is ``alpha * ceil(log P)`` inside the factor-2 sum,
  as in the analytic model (a literal ring schedule takes ``2(P-1)`` rounds).
* ``B / p_c`` and ``|W| / p_r`` are real-valued; nothing is rounded.
* Records whose latency and word counts are both zero are dropped, so a
  degenerate communicator of size 1 leaves no trace.
"""

from __future__ import annotations

import bisect
import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .netspec import LayerDims, NetworkSpec


class CostModelError(ValueError):
    pass


def ceil_log2(p: int) -> int:
    if p < 1:
        raise CostModelError(f"process count must be >= 1, got {p}")
    return (p - 1).bit_length()


def _frac(p) -> float:
    return (p - 1) / p


# ---------------------------------------------------------------------------
# hardware and compute models
# ---------------------------------------------------------------------------


class ComputeMode(enum.Enum):
    TABLE = "table"
    THROUGHPUT = "throughput"


@dataclass(frozen=True)
class ComputeModel:
    """Seconds of computation per SGD iteration.

    Table mode interpolates measured single-process iteration times over the
    per-process batch (clamped at both ends). Throughput mode charges
    ``6 * |W_i| * b_local`` flops per layer: forward plus two backward products.
    """

    mode: ComputeMode
    table: tuple = ()
    flops_per_second: float = 0.0
    efficiency: float = 1.0

    def __post_init__(self):
        if self.mode is ComputeMode.TABLE:
            if not self.table:
                raise CostModelError("compute table is empty")
            keys = [b for b, _ in self.table]
            if any(b2 <= b1 for b1, b2 in zip(keys, keys[1:])):
                raise CostModelError("compute table batch sizes must be strictly increasing")
            if any(t <= 0 for _, t in self.table) or keys[0] <= 0:
                raise CostModelError("compute table entries must be positive")
        else:
            if self.flops_per_second <= 0 or not 0 < self.efficiency <= 1:
                raise CostModelError("throughput needs flops > 0 and 0 < efficiency <= 1")

    @classmethod
    def from_table(cls, points: Iterable[Sequence[float]]) -> "ComputeModel":
        return cls(ComputeMode.TABLE, tuple((float(b), float(t)) for b, t in points))

    @classmethod
    def from_throughput(cls, flops: float, efficiency: float = 1.0) -> "ComputeModel":
        return cls(ComputeMode.THROUGHPUT, (), float(flops), float(efficiency))

    def table_time(self, batch: float) -> float:
        keys = [b for b, _ in self.table]
        vals = [t for _, t in self.table]
        if batch <= keys[0]:
            return vals[0]
        if batch >= keys[-1]:
            return vals[-1]
        j = bisect.bisect_right(keys, batch)
        b0, b1 = keys[j - 1], keys[j]
        t0, t1 = vals[j - 1], vals[j]
        return t0 + (t1 - t0) * (batch - b0) / (b1 - b0)

    def iteration_time(self, net: NetworkSpec, grid: "GridConfig", batch: float) -> float:
        if self.mode is ComputeMode.TABLE:
            # whole-model time at the local batch, with the model split p_r ways
            return self.table_time(batch / grid.p_c) / grid.p_r
        flops = 0.0
        for dims, role in zip(net.dims, grid.effective_assignment()):
            if role is Assignment.BATCH:
                flops += 6.0 * dims.weight_count * (batch / grid.p)
            else:
                flops += 6.0 * (dims.weight_count / grid.p_r) * (batch / grid.p_c)
        return flops / (self.flops_per_second * self.efficiency)

    def to_dict(self) -> dict:
        if self.mode is ComputeMode.TABLE:
            return {"mode": "table", "table": [list(p) for p in self.table]}
        return {"mode": "throughput", "flops": self.flops_per_second, "efficiency": self.efficiency}


@dataclass(frozen=True)
class HardwareModel:
    alpha: float = 2e-6
    inv_bandwidth: float = 1.0 / 6e9
    word_bytes: int = 4
    compute: Optional[ComputeModel] = None

    def __post_init__(self):
        if self.alpha < 0:
            raise CostModelError("alpha must be >= 0")
        if self.inv_bandwidth <= 0:
            raise CostModelError("inverse bandwidth must be > 0")
        if self.word_bytes not in (2, 4, 8):
            raise CostModelError(f"word_bytes must be 2, 4 or 8, got {self.word_bytes}")

    @property
    def beta(self) -> float:
        """Seconds per word."""
        return self.inv_bandwidth * self.word_bytes

    @classmethod
    def unit(cls, alpha: float = 1.0, beta: float = 1.0) -> "HardwareModel":
        """Hardware with the given per-word beta (handy for counting)."""
        return cls(alpha=alpha, inv_bandwidth=beta / 4, word_bytes=4)


HW_KEYS = {"alpha_s", "bandwidth_bytes_per_s", "word_bytes", "compute"}


def hardware_from_dict(doc) -> HardwareModel:
    if not isinstance(doc, dict):
        raise CostModelError("hardware document must be an object")
    extra = sorted(set(doc) - HW_KEYS)
    if extra:
        raise CostModelError(f"hardware: unknown field '{extra[0]}'")
    for key in ("alpha_s", "bandwidth_bytes_per_s"):
        if key not in doc:
            raise CostModelError(f"hardware: missing field '{key}'")
    bw = doc["bandwidth_bytes_per_s"]
    if not isinstance(bw, (int, float)) or bw <= 0:
        raise CostModelError("hardware: bandwidth_bytes_per_s must be positive")
    compute = None
    if doc.get("compute") is not None:
        c = doc["compute"]
        mode = c.get("mode") if isinstance(c, dict) else None
        if mode == "table":
            compute = ComputeModel.from_table(c.get("table") or [])
        elif mode == "throughput":
            compute = ComputeModel.from_throughput(c.get("flops", 0), c.get("efficiency", 1.0))
        else:
            raise CostModelError("hardware: compute.mode must be 'table' or 'throughput'")
    return HardwareModel(
        alpha=float(doc["alpha_s"]),
        inv_bandwidth=1.0 / bw,
        word_bytes=doc.get("word_bytes", 4),
        compute=compute,
    )


def load_hardware(path) -> HardwareModel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CostModelError(f"{path}: not valid JSON: {exc}") from None
    return hardware_from_dict(doc)


# ---------------------------------------------------------------------------
# grids and breakdowns
# ---------------------------------------------------------------------------


class Assignment(enum.Enum):
    BATCH = "batch"
    MODEL = "model"
    DOMAIN = "domain"


@dataclass(frozen=True)
class GridConfig:
    p_r: int
    p_c: int
    assignment: tuple = ()

    def __post_init__(self):
        if self.p_r < 1 or self.p_c < 1:
            raise CostModelError(f"grid {self.p_r}x{self.p_c} must have p_r, p_c >= 1")
        object.__setattr__(self, "assignment", tuple(self.assignment))

    @property
    def p(self) -> int:
        return self.p_r * self.p_c

    def effective_assignment(self):
        """Per-layer roles; with a single grid row everything is batch parallel."""
        if self.p_r == 1:
            return tuple(Assignment.BATCH for _ in self.assignment)
        return self.assignment

    def validate(self, net: NetworkSpec):
        if len(self.assignment) != len(net.dims):
            raise CostModelError(
                f"assignment has {len(self.assignment)} entries for {len(net.dims)} layers"
            )
        for i, (role, dims) in enumerate(zip(self.assignment, net.dims)):
            if role is Assignment.DOMAIN and not dims.is_conv:
                raise CostModelError(f"layer {i}: domain parallelism needs a conv layer")

    def label(self) -> str:
        return f"{self.p_r}x{self.p_c}"


FORWARD = "forward"
BACKWARD = "backward"

ALLGATHER = "allgather"
ALLREDUCE_DATA = "allreduce_data"
ALLREDUCE_WEIGHTS = "allreduce_weights"
HALO_FORWARD = "halo_forward"
HALO_BACKWARD = "halo_backward"
TWOD_FORWARD = "summa_2d"


@dataclass(frozen=True)
class CostRecord:
    layer: int
    phase: str
    kind: str
    group: int
    latency_units: float
    words: float

    def seconds(self, hw: HardwareModel) -> float:
        return self.latency_units * hw.alpha + self.words * hw.beta


@dataclass
class CostBreakdown:
    records: list = field(default_factory=list)

    def add(self, layer, phase, kind, group, latency_units, words):
        if latency_units < 0 or words < 0:
            raise CostModelError("negative cost term")
        if latency_units == 0 and words == 0:
            return
        self.records.append(CostRecord(layer, phase, kind, group, latency_units, words))

    def extend(self, other: "CostBreakdown"):
        self.records.extend(other.records)

    @property
    def latency_units(self) -> float:
        return sum(r.latency_units for r in self.records)

    @property
    def words(self) -> float:
        return sum(r.words for r in self.records)

    def total(self, alpha: float = 1.0, beta: float = 1.0) -> float:
        return sum(r.latency_units * alpha + r.words * beta for r in self.records)

    def to_seconds(self, hw: HardwareModel) -> float:
        return sum(r.seconds(hw) for r in self.records)

    def select(self, phase=None, kind=None, layer=None) -> "CostBreakdown":
        return CostBreakdown(
            [
                r
                for r in self.records
                if (phase is None or r.phase == phase)
                and (kind is None or r.kind == kind)
                and (layer is None or r.layer == layer)
            ]
        )

    def words_by_key(self) -> dict:
        out: dict = {}
        for r in self.records:
            out[(r.layer, r.kind)] = out.get((r.layer, r.kind), 0.0) + r.words
        return out

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------------------
# per-layer terms shared by the different strategies
# ---------------------------------------------------------------------------


def _gather_term(bd, i, p_r, local_batch, d):
    bd.add(i, FORWARD, ALLGATHER, p_r, ceil_log2(p_r), local_batch * _frac(p_r) * d)


def _data_reduce_term(bd, i, p_r, local_batch, d_prev):
    bd.add(
        i, BACKWARD, ALLREDUCE_DATA, p_r,
        2 * ceil_log2(p_r), 2 * (local_batch * _frac(p_r) * d_prev),
    )


def _weight_reduce_term(bd, i, group, weights):
    bd.add(
        i, BACKWARD, ALLREDUCE_WEIGHTS, group,
        2 * ceil_log2(group), 2 * (_frac(group) * weights),
    )


def _halo_terms(bd, i, dims: LayerDims, local_batch, group):
    halo_h = dims.kernel_h // 2
    halo_w = dims.kernel_w // 2
    # a 1x1 kernel sends nothing, so no message either
    if halo_h:
        bd.add(i, FORWARD, HALO_FORWARD, group, 1, local_batch * dims.x_w * dims.x_c * halo_h)
    if halo_w:
        bd.add(i, BACKWARD, HALO_BACKWARD, group, 1, local_batch * dims.y_w * dims.y_c * halo_w)


def _layers(net):
    return list(enumerate(net.dims))


# ---------------------------------------------------------------------------
# the strategies
# ---------------------------------------------------------------------------


def cost_batch_parallel(net: NetworkSpec, P: int, hw: HardwareModel = None) -> CostBreakdown:
    """Pure batch parallelism: one ring all-reduce of every layer's gradient."""
    bd = CostBreakdown()
    for i, dims in _layers(net):
        _weight_reduce_term(bd, i, P, dims.weight_count)
    return bd


def cost_model_parallel(net: NetworkSpec, P: int, B: float, hw: HardwareModel = None) -> CostBreakdown:
    """Pure model parallelism: an all-gather per layer, an all-reduce of dX
    for every layer except the first."""
    bd = CostBreakdown()
    for i, dims in _layers(net):
        _gather_term(bd, i, P, B, dims.d_out)
        if i > 0:
            _data_reduce_term(bd, i, P, B, dims.d_in)
    return bd


def cost_domain_parallel(net: NetworkSpec, P: int, B: float, hw: HardwareModel = None) -> CostBreakdown:
    """Pure domain parallelism over image height.

    The halo alpha terms are charged even at ``P == 1``, exactly as the
    closed form is written; treat ``P == 1`` as a degenerate input.
    """
    bd = CostBreakdown()
    for i, dims in _layers(net):
        if not dims.is_conv:
            raise CostModelError(f"layer {i}: domain parallelism is not applicable to FC layers")
        _halo_terms(bd, i, dims, B, P)
        _weight_reduce_term(bd, i, P, dims.weight_count)
    return bd


def cost_hybrid_15d(net: NetworkSpec, p_r: int, p_c: int, B: float, hw: HardwareModel = None) -> CostBreakdown:
    """The 1.5D algorithm on a ``p_r x p_c`` grid, same grid for every layer."""
    bd = CostBreakdown()
    for i, dims in _layers(net):
        _gather_term(bd, i, p_r, B / p_c, dims.d_out)
        if i > 0:
            _data_reduce_term(bd, i, p_r, B / p_c, dims.d_in)
        _weight_reduce_term(bd, i, p_c, dims.weight_count / p_r)
    return bd


def cost_integrated(net: NetworkSpec, grid: GridConfig, B: float, hw: HardwareModel = None) -> CostBreakdown:
    """Integrated model, batch and domain parallelism with per-layer roles.

    Model layers cost like :func:`cost_hybrid_15d`. Domain layers pay the
    two halo exchanges at local batch ``B / p_c`` plus a weight all-reduce over
    all ``P``. Batch layers run on the ``1 x P`` view of the grid.
    """
    grid.validate(net)
    P = grid.p
    bd = CostBreakdown()
    for (i, dims), role in zip(_layers(net), grid.effective_assignment()):
        if role is Assignment.MODEL:
            _gather_term(bd, i, grid.p_r, B / grid.p_c, dims.d_out)
            if i > 0:
                _data_reduce_term(bd, i, grid.p_r, B / grid.p_c, dims.d_in)
            _weight_reduce_term(bd, i, grid.p_c, dims.weight_count / grid.p_r)
        elif role is Assignment.DOMAIN:
            _halo_terms(bd, i, dims, B / grid.p_c, grid.p_r)
            _weight_reduce_term(bd, i, P, dims.weight_count)
        else:
            _weight_reduce_term(bd, i, P, dims.weight_count)
    return bd


def cost_redistribution(layer: LayerDims, P: int, B: float, hw: HardwareModel = None) -> CostBreakdown:
    """All-gather moving X from a batch layout to a model layout."""
    bd = CostBreakdown()
    _gather_term(bd, 0, P, B, layer.d_out)
    return bd


def crossover_batch(layer: LayerDims) -> float:
    """Batch size above which batch parallelism moves fewer words than model
    parallelism for this conv layer."""
    if not layer.is_conv:
        raise CostModelError("crossover is defined for conv layers only")
    return 2 * layer.kernel_h * layer.kernel_w * layer.x_c / (3 * layer.y_h * layer.y_w)


def cost_2d_stationary_a(layer: LayerDims, p_r: int, p_c: int, B: float, hw: HardwareModel = None) -> CostBreakdown:
    """Stationary-A SUMMA forward product, large-grid approximation.

    Assumes ``d_in == d_out`` and ``(p-1)/p ~ 1``; four communication steps.
    """
    if p_r < 1 or p_c < 1:
        raise CostModelError("grid dimensions must be >= 1")
    d = layer.d_out
    bd = CostBreakdown()
    bd.add(0, FORWARD, TWOD_FORWARD, p_r * p_c, 4, 2 * B * d / p_r + B * d / p_c)
    return bd


@dataclass(frozen=True)
class MemoryFootprint:
    weights: float
    activations: float


def memory_footprint(net: NetworkSpec, grid: GridConfig, B: float) -> MemoryFootprint:
    """Per-rank words held for weights and for activations (inputs + outputs)."""
    roles = grid.assignment or (Assignment.MODEL,) * len(net.dims)
    weights = 0.0
    acts = 0.0
    for dims, role in zip(net.dims, roles):
        if role is Assignment.MODEL:
            weights += dims.weight_count / grid.p_r
            acts += B * (dims.d_in + dims.d_out) / grid.p_c
        else:
            weights += dims.weight_count
            acts += B * (dims.d_in + dims.d_out) / grid.p
    return MemoryFootprint(weights, acts)
