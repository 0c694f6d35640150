"""Deterministic discrete-event run of producer, broker, autoscaler and consumers.

Time is an integer tick. Within a tick the steps always run in this order:

1. publish every batch whose trigger time is this tick;
2. replicas whose work finishes now ack and write their record;
3. overdue in-flight messages go back to the backlog (or are dead-lettered,
   which writes a ``failed`` record);
4. on poll ticks, each pipeline's autoscaler looks at its backlog and sets
   the replica count;
5. idle replicas pull, lowest replica id first, and start a job that takes
   ``service_time`` ticks (an injected crash drops the message instead);
6. the tick's series values and broker counts are recorded.

The run ends after the first tick at which every batch has been published,
the broker is drained and no replica is busy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..errors import InvalidInputError, SimulationTimeout, StaleAckError
from ..rng import XorShift64Star, derive_seed
from .autoscale import autoscale_step
from .broker import Broker
from .consumer import Counters, flush_dead_letters, process, record_for, tally
from .records import ResultTable


@dataclass(frozen=True)
class SimConfig:
    service_time: int = 1
    visibility_timeout: int = 30
    max_deliveries: int = 3
    crash_rate: float = 0.0
    seed: int = 0
    max_ticks: int = 100_000


@dataclass
class RunMetrics:
    ticks: int = 0
    total_inferences: int = 0
    detector_calls: int = 0
    duplicate_inferences: int = 0
    rejected: int = 0
    failed: int = 0
    processed: int = 0
    messages: int = 0
    crashes: int = 0
    redeliveries: int = 0
    stale_acks: int = 0
    backlog: list = field(default_factory=list)
    replicas: list = field(default_factory=list)
    cumulative_inferences: list = field(default_factory=list)
    per_pipeline: dict = field(default_factory=dict)
    broker_counts: list = field(default_factory=list)

    def summary(self):
        return {
            "ticks": self.ticks,
            "messages": self.messages,
            "processed": self.processed,
            "total_inferences": self.total_inferences,
            "detector_calls": self.detector_calls,
            "duplicate_inferences": self.duplicate_inferences,
            "rejected": self.rejected,
            "failed": self.failed,
            "crashes": self.crashes,
            "redeliveries": self.redeliveries,
            "stale_acks": self.stale_acks,
            "max_replicas_seen": max(self.replicas, default=0),
        }

    def write(self, path, comments=()):
        """Comma-separated series ``tick,backlog,replicas,cumulative_inferences``,
        then a ``# summary`` block of ``key,value`` lines."""
        lines = [f"# {c}" for c in comments]
        lines.append("tick,backlog,replicas,cumulative_inferences")
        for t, (b, r, c) in enumerate(zip(self.backlog, self.replicas, self.cumulative_inferences)):
            lines.append(f"{t},{b},{r},{c}")
        lines.append("# summary")
        for k, v in self.summary().items():
            lines.append(f"{k},{v}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass
class _Replica:
    rid: str
    num: int
    busy_until: int = -1
    job: object = None  # (delivery, outcome) or None for a crashed job
    draining: bool = False


class _Pool:
    def __init__(self, spec, policy):
        self.spec = spec
        self.policy = policy
        self.replicas = []
        self.target = 0
        self.last_scale = None
        self.next_id = 0
        self.backlog_seen = []
        self.replica_trace = []

    def resize(self, n):
        active = [r for r in self.replicas if not r.draining]
        if n > len(active):
            for _ in range(n - len(active)):
                self.replicas.append(_Replica(f"{self.spec.name}-r{self.next_id}", self.next_id))
                self.next_id += 1
        elif n < len(active):
            # newest replicas leave first; busy ones finish their job before going
            for r in sorted(active, key=lambda r: r.num, reverse=True)[: len(active) - n]:
                r.draining = True
        self.target = n

    def reap(self, now):
        self.replicas = [r for r in self.replicas if not (r.draining and r.busy_until <= now)]


def _schedule(batches):
    out = {}
    for t, items in batches:
        out.setdefault(int(t), []).extend(items)
    return out


def run(topology, batches, policy, sim=SimConfig(), on_tick=None):
    """Drive the topology until every published message is acked or dead-lettered.

    ``batches`` is a list of ``(trigger_time, [(sample_id, features), ...])``.
    Returns ``(RunMetrics, {pipeline name: ResultTable})``. ``on_tick(t, broker)``
    is called at the end of every tick. Raises :class:`SimulationTimeout`
    (carrying the partial metrics and tables) after ``sim.max_ticks`` ticks.
    """
    names = topology.names
    broker = Broker(names, sim.visibility_timeout, sim.max_deliveries)
    tables = {n: ResultTable(n) for n in names}
    counters = {n: Counters() for n in names}
    pools = {p.name: _Pool(p, policy) for p in topology.pipelines}
    for pool in pools.values():
        pool.resize(policy.min_replicas)
    crash_rng = XorShift64Star(derive_seed(sim.seed, "crash"))
    schedule = _schedule(batches)
    last_trigger = max(schedule, default=-1)
    metrics = RunMetrics()
    route = topology.route

    t = 0
    while True:
        # 1. producer
        for trigger in [t] if t in schedule else []:
            items = schedule[trigger]
            if route is None:
                metrics.messages += broker.publish(trigger, items)
            else:
                metrics.messages += broker.publish(trigger, items, lambda sid: route(sid))

        # 2. finish jobs
        for name, pool in pools.items():
            for r in pool.replicas:
                if r.busy_until == t:
                    if r.job is not None:
                        delivery, outcome = r.job
                        try:
                            broker.ack(delivery.ack_id)
                        except StaleAckError:
                            pass
                        else:
                            tables[name].append(record_for(pool.spec, delivery, outcome, r.rid, t))
                            tally(counters[name], outcome)
                    r.job = None
            pool.reap(t)

        # 3. redelivery / dead letters
        broker.expire(t)
        flush_dead_letters(broker, tables, counters, t)

        # 4. autoscaling
        for name, pool in pools.items():
            observed = broker.backlog(name)
            if t % policy.poll_interval == 0:
                new = autoscale_step(policy, observed, pool.target, t, pool.last_scale)
                if new != pool.target:
                    pool.resize(new)
                    pool.last_scale = t
            pool.backlog_seen.append(observed)
            pool.replica_trace.append(pool.target)

        # 5. pull
        for name, pool in pools.items():
            for r in pool.replicas:
                if r.draining or r.busy_until > t:
                    continue
                delivery = broker.pull(name, r.rid, t)
                if delivery is None:
                    break
                r.busy_until = t + sim.service_time
                if sim.crash_rate and crash_rng.uniform() < sim.crash_rate:
                    metrics.crashes += 1
                    r.job = None
                    continue
                try:
                    r.job = (delivery, process(pool.spec, delivery.message.payload))
                except InvalidInputError:
                    r.job = None
                    broker.nack(delivery.ack_id)
                    flush_dead_letters(broker, tables, counters, t)

        # 6. bookkeeping
        metrics.backlog.append(sum(p.backlog_seen[-1] for p in pools.values()))
        metrics.replicas.append(sum(p.target for p in pools.values()))
        metrics.cumulative_inferences.append(sum(c.inferences for c in counters.values()))
        metrics.broker_counts.append(broker.counts())
        if on_tick is not None:
            on_tick(t, broker)

        busy = any(r.busy_until > t for p in pools.values() for r in p.replicas)
        if t >= last_trigger and broker.drained() and not busy:
            break
        t += 1
        if t >= sim.max_ticks:
            _finalize(metrics, broker, counters, _traces(pools), tables, t)
            raise SimulationTimeout(
                f"{broker.counts()['backlog'] + broker.counts()['in_flight']} message(s) "
                f"unprocessed after {t} ticks", metrics, tables)
    _finalize(metrics, broker, counters, _traces(pools), tables, t + 1)
    return metrics, tables


def _traces(pools):
    return {n: (list(p.backlog_seen), list(p.replica_trace)) for n, p in pools.items()}


def _finalize(metrics, broker, counters, traces, tables, ticks):
    metrics.ticks = ticks
    metrics.total_inferences = sum(c.inferences for c in counters.values())
    metrics.detector_calls = sum(c.detector_calls for c in counters.values())
    metrics.rejected = sum(c.rejected for c in counters.values())
    metrics.failed = sum(c.failed for c in counters.values())
    metrics.processed = sum(c.processed for c in counters.values())
    metrics.redeliveries = broker.redeliveries
    metrics.stale_acks = broker.stale_acks
    metrics.duplicate_inferences = duplicate_count(tables.values())
    metrics.per_pipeline = {
        name: {
            "processed": counters[name].processed,
            "inferences": counters[name].inferences,
            "rejected": counters[name].rejected,
            "failed": counters[name].failed,
            "backlog": traces[name][0],
            "replicas": traces[name][1],
        }
        for name in traces
    }


def duplicate_count(tables):
    """Processed messages beyond the first for each sample, across all tables."""
    seen = {}
    for table in tables:
        for rec in table.records():
            if rec.verdict != "failed":
                seen[rec.sample_id] = seen.get(rec.sample_id, 0) + 1
    return sum(c - 1 for c in seen.values())


def write_tables(tables, outdir, comments=()):
    import os

    paths = {}
    for name, table in sorted(tables.items()):
        path = os.path.join(outdir, f"results_{name}.jsonl")
        table.write(path, comments)
        paths[name] = path
    return paths


def write_manifest(path, topology, policy, sim, extra=None):
    manifest = {
        "topology": topology.describe(),
        "policy": {k: getattr(policy, k) for k in policy.__dataclass_fields__},
        "sim": {k: getattr(sim, k) for k in sim.__dataclass_fields__},
    }
    manifest.update(extra or {})
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest
