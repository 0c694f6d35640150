"""Threaded run of the same topology against a shared broker.

Replicas are real threads; the autoscaler is a thread that polls the
backlog. Timing is wall-clock, so record order and replica ids vary from run
to run; counts and the at-least-once guarantees do not.
"""

from __future__ import annotations

import threading
import time

from ..errors import InvalidInputError, SimulationTimeout, StaleAckError
from .autoscale import autoscale_step
from .broker import Broker
from .consumer import Counters, flush_dead_letters, process, record_for, tally
from .records import ResultTable
from .sim import RunMetrics, _finalize


class _Worker(threading.Thread):
    def __init__(self, runner, pipeline, rid):
        super().__init__(name=rid, daemon=True)
        self.runner, self.pipeline, self.rid = runner, pipeline, rid
        self.stop = threading.Event()

    def run(self):
        r = self.runner
        name = self.pipeline.name
        while not self.stop.is_set():
            now = r.now()
            delivery = r.broker.pull(name, self.rid, now)
            if delivery is None:
                time.sleep(r.idle_sleep)
                continue
            try:
                outcome = process(self.pipeline, delivery.message.payload)
            except InvalidInputError:
                r.broker.nack(delivery.ack_id)
                continue
            if r.service_seconds:
                time.sleep(r.service_seconds)
            try:
                r.broker.ack(delivery.ack_id)
            except StaleAckError:
                continue
            r.tables[name].append(record_for(self.pipeline, delivery, outcome, self.rid, r.now()))
            with r.lock:
                tally(r.counters[name], outcome)


class LiveRunner:
    def __init__(self, topology, policy, visibility_timeout=5.0, max_deliveries=3,
                 poll_seconds=0.01, service_seconds=0.0, idle_sleep=0.001):
        self.topology, self.policy = topology, policy
        self.broker = Broker(topology.names, visibility_timeout, max_deliveries)
        self.tables = {n: ResultTable(n) for n in topology.names}
        self.counters = {n: Counters() for n in topology.names}
        self.poll_seconds = poll_seconds
        self.service_seconds = service_seconds
        self.idle_sleep = idle_sleep
        self.lock = threading.Lock()
        self._t0 = time.monotonic()

    def now(self):
        return time.monotonic() - self._t0

    def run(self, items, timeout=60.0):
        """Publish ``items`` once and serve them; returns ``(RunMetrics, tables)``."""
        metrics = RunMetrics()
        metrics.messages = self.broker.publish(0, items, self.topology.route)
        pools = {p.name: [] for p in self.topology.pipelines}
        specs = {p.name: p for p in self.topology.pipelines}
        last_scale = {n: None for n in pools}
        next_id = {n: 0 for n in pools}
        traces = {n: ([], []) for n in pools}

        def resize(name, n):
            workers = pools[name]
            while len(workers) < n:
                w = _Worker(self, specs[name], f"{name}-r{next_id[name]}")
                next_id[name] += 1
                workers.append(w)
                w.start()
            while len(workers) > n:
                workers.pop().stop.set()

        for name in pools:
            resize(name, self.policy.min_replicas)
        deadline = time.monotonic() + timeout
        try:
            while True:
                now = self.now()
                self.broker.expire(now)
                with self.lock:
                    flush_dead_letters(self.broker, self.tables, self.counters, now)
                total = 0
                for name in pools:
                    backlog = self.broker.backlog(name)
                    new = autoscale_step(self.policy, backlog, len(pools[name]), now, last_scale[name])
                    if new != len(pools[name]):
                        resize(name, new)
                        last_scale[name] = now
                    total += len(pools[name])
                    traces[name][0].append(backlog)
                    traces[name][1].append(len(pools[name]))
                metrics.backlog.append(self.broker.backlog())
                metrics.replicas.append(total)
                metrics.cumulative_inferences.append(sum(c.inferences for c in self.counters.values()))
                metrics.broker_counts.append(self.broker.counts())
                if self.broker.drained():
                    break
                if time.monotonic() > deadline:
                    raise SimulationTimeout("live run timed out", metrics, self.tables)
                time.sleep(self.poll_seconds)
        finally:
            for workers in pools.values():
                for w in workers:
                    w.stop.set()
            for workers in pools.values():
                for w in workers:
                    w.join(timeout=5)
        with self.lock:
            flush_dead_letters(self.broker, self.tables, self.counters, self.now())
        _finalize(metrics, self.broker, self.counters, traces, self.tables, len(metrics.backlog))
        return metrics, self.tables

