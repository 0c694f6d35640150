"""In-process model of the batch inference deployment."""

from .autoscale import ScalingPolicy, autoscale_step, desired_replicas
from .broker import Broker, Delivery, Message
from .consumer import (
    EFFICIENCY_CENTRIC,
    TASK_CENTRIC,
    Counters,
    PipelineSpec,
    Topology,
    consume_step,
    flush_dead_letters,
    model_checksum,
    process,
)
from .records import PredictionRecord, ResultTable, query_results, query_tables
from .sim import RunMetrics, SimConfig, duplicate_count, run

__all__ = [
    "Broker", "Counters", "Delivery", "EFFICIENCY_CENTRIC", "Message", "PipelineSpec",
    "PredictionRecord", "ResultTable", "RunMetrics", "ScalingPolicy", "SimConfig",
    "TASK_CENTRIC", "Topology", "autoscale_step", "consume_step", "desired_replicas",
    "duplicate_count", "flush_dead_letters", "model_checksum", "process", "query_results",
    "query_tables", "run",
]
