"""Plan and verify integrated batch, model and domain parallelism for DNN training."""

from .costmodel import (
    Assignment,
    ComputeModel,
    CostBreakdown,
    GridConfig,
    HardwareModel,
    cost_2d_stationary_a,
    cost_batch_parallel,
    cost_domain_parallel,
    cost_hybrid_15d,
    cost_integrated,
    cost_model_parallel,
    cost_redistribution,
    crossover_batch,
    memory_footprint,
)
from .netspec import (
    ConvLayer,
    FCLayer,
    InputShape,
    NetworkSpec,
    alexnet_preset,
    derive_dims,
    parse_network,
    serialize_network,
)
from .planner import Overlap, PlanQuery, Policy, enumerate_grids, plan

__version__ = "0.1.0"
