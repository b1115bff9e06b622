"""Serial, data-parallel, model-parallel and hybrid execution over virtual devices."""

from .engine import Event, ExecTrace, ParamAccessError, SchedulingError, Segment, execute
from .placement import PlacementError, PlacementPlan, Strategy, build_placement
from .strategies import (StrategyResult, allreduce_grads, plan_for, run_strategy,
                         scatter_batch, strategy_variant)
from .wavefront import Task, WavefrontSchedule, wavefront_order

__all__ = ["Event", "ExecTrace", "ParamAccessError", "SchedulingError", "Segment", "execute",
           "PlacementError", "PlacementPlan", "Strategy", "build_placement", "StrategyResult",
           "allreduce_grads", "plan_for", "run_strategy", "scatter_batch", "strategy_variant",
           "Task", "WavefrontSchedule", "wavefront_order"]
