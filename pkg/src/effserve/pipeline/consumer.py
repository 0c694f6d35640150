"""Topologies and the per-message work a consumer replica does."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .. import numkit
from ..classifiers import is_multitask, rank_labels
from ..errors import InvalidInputError, StaleAckError
from ..oodkit import kl_uniform_scores
from .records import FAILED, PREDICTED, REJECTED, PredictionRecord

TASK_CENTRIC = "task-centric"
EFFICIENCY_CENTRIC = "efficiency-centric"


@dataclass(frozen=True)
class PipelineSpec:
    """One model + detector + result table, fed by its own subscription."""

    name: str
    model: numkit.MlpModel
    tau: float = float("-inf")
    n: int = 1
    task: object = None


@dataclass(frozen=True)
class Topology:
    kind: str
    pipelines: tuple
    # sample_id -> pipeline names; None sends every sample to every pipeline
    route: object = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in (TASK_CENTRIC, EFFICIENCY_CENTRIC):
            raise InvalidInputError(f"unknown topology {self.kind!r}")
        if not self.pipelines:
            raise InvalidInputError("a topology needs at least one pipeline")
        if self.kind == EFFICIENCY_CENTRIC and len(self.pipelines) != 1:
            raise InvalidInputError("efficiency-centric topology has exactly one pipeline")

    @classmethod
    def efficiency_centric(cls, model, tau=float("-inf"), n=2, name="unified"):
        return cls(EFFICIENCY_CENTRIC, (PipelineSpec(name, model, tau, n),))

    @classmethod
    def task_centric(cls, entries, route=None):
        """``entries``: iterable of (TaskSpec, model, tau)."""
        specs = tuple(PipelineSpec(t.name, m, tau, 1, t) for t, m, tau in entries)
        return cls(TASK_CENTRIC, specs, route)

    @property
    def names(self):
        return [p.name for p in self.pipelines]

    def describe(self):
        return {
            "kind": self.kind,
            "pipelines": [
                {"name": p.name, "tau": p.tau, "n": p.n, "model_sha256": model_checksum(p.model),
                 "task": None if p.task is None else [p.task.positive_label, p.task.negative_label]}
                for p in self.pipelines
            ],
        }


def model_checksum(model):
    h = hashlib.sha256()
    h.update(repr((model.activation, model.heads)).encode())
    for arr in model.params():
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class Outcome:
    """Result of running one message through a pipeline (before it is committed)."""

    verdict: str
    topn: tuple
    score: float
    detector_calls: int
    classifier_calls: int


def process(pipeline, payload):
    """Detector gate then top-n classification for one feature vector.

    The detector reads the network's logits (max logit, or the KL score for a
    multi-head network). Below ``tau`` the sample is rejected and no
    classification is made; otherwise the top-``n`` labels are ranked from
    the same logits.
    """
    model = pipeline.model
    x = np.asarray(payload, dtype=np.float64)
    logits = numkit.forward(model, x)
    if is_multitask(model):
        score = float(kl_uniform_scores(model, x)[0])
    else:
        score = float(logits[0].max())
    if score < pipeline.tau:
        return Outcome(REJECTED, (), score, 1, 0)
    if is_multitask(model) or len(model.heads) != 1:
        raise InvalidInputError("pipelines classify with a single softmax head")
    head = model.heads[0]
    probs = numkit.softmax(logits[0])
    topn = tuple((head.labels[i], float(probs[i])) for i in rank_labels(logits[0], pipeline.n))
    return Outcome(PREDICTED, topn, score, 1, 1)


def record_for(pipeline, delivery, outcome, replica_id, now):
    return PredictionRecord(
        sample_id=delivery.message.sample_id,
        table=pipeline.name,
        verdict=outcome.verdict,
        topn=outcome.topn,
        ood_score=outcome.score,
        timestamp=now,
        replica=replica_id,
        message_id=delivery.message_id,
        delivery=delivery.delivery,
    )


def failed_record(pipeline_name, message, now):
    return PredictionRecord(
        sample_id=message.sample_id,
        table=pipeline_name,
        verdict=FAILED,
        timestamp=now,
        message_id=message.message_id,
        delivery=message.delivery_count,
    )


@dataclass
class Counters:
    detector_calls: int = 0
    inferences: int = 0
    rejected: int = 0
    failed: int = 0
    processed: int = 0


def consume_step(replica_id, broker, pipeline, table, counters, now):
    """Pull one message, run it, write the record and ack, all at ``now``.

    Returns the record, or None when nothing was committed. A message the
    model cannot handle is handed back with a nack; once it runs out of
    deliveries the broker dead-letters it and :func:`flush_dead_letters`
    turns it into a ``failed`` record.
    """
    delivery = broker.pull(pipeline.name, replica_id, now)
    if delivery is None:
        return None
    try:
        outcome = process(pipeline, delivery.message.payload)
    except InvalidInputError:
        broker.nack(delivery.ack_id)
        return None
    rec = record_for(pipeline, delivery, outcome, replica_id, now)
    try:
        broker.ack(delivery.ack_id)
    except StaleAckError:
        return None
    table.append(rec)
    tally(counters, outcome)
    return rec


def tally(counters, outcome):
    counters.processed += 1
    counters.detector_calls += outcome.detector_calls
    counters.inferences += outcome.classifier_calls
    if outcome.verdict == REJECTED:
        counters.rejected += 1


def flush_dead_letters(broker, tables, counters, now):
    """Write a ``failed`` record for every message the broker dead-lettered.

    ``tables`` maps subscription name to result table; ``counters`` maps it
    to a :class:`Counters`.
    """
    out = []
    for msg in broker.take_dead_letters():
        rec = failed_record(msg.subscription, msg, now)
        tables[msg.subscription].append(rec)
        counters[msg.subscription].failed += 1
        out.append(rec)
    return out
