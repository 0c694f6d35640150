"""In-process publish/subscribe broker with acknowledgement and redelivery.

Each subscription keeps its own copy of every message (fan-out).  A message
copy lives in exactly one of: backlog, in-flight, acked, dead-lettered.
All public methods take one lock, so the broker can be shared by threads.
"""

from __future__ import annotations

import logging
import threading
from collections import OrderedDict, deque
from dataclasses import dataclass

from ..errors import DuplicatePublishError, StaleAckError

log = logging.getLogger(__name__)


@dataclass
class Message:
    message_id: str
    sample_id: str
    payload: object
    publish_time: int
    subscription: str
    delivery_count: int = 0


@dataclass(frozen=True)
class Delivery:
    """What a consumer holds after a pull; ``ack_id`` names this delivery only."""

    message: Message
    delivery: int
    deadline: float

    @property
    def ack_id(self):
        return f"{self.message.message_id}@{self.delivery}"

    @property
    def message_id(self):
        return self.message.message_id


class _Subscription:
    def __init__(self, name):
        self.name = name
        self.backlog = deque()
        self.in_flight = OrderedDict()  # message_id -> (Message, deadline)
        self.acked = {}
        self.dead = {}
        self.published = 0


class Broker:
    def __init__(self, subscriptions=("default",), visibility_timeout=30, max_deliveries=3):
        if max_deliveries < 1:
            raise ValueError("max_deliveries must be >= 1")
        self.visibility_timeout = visibility_timeout
        self.max_deliveries = max_deliveries
        self._subs = {name: _Subscription(name) for name in subscriptions}
        self._keys = set()
        self._lock = threading.RLock()
        self.stale_acks = 0
        self.redeliveries = 0
        self._dead_events = []

    @property
    def subscriptions(self):
        return list(self._subs)

    def publish(self, trigger_time, items, subscriptions=None):
        """Enqueue ``(sample_id, payload)`` pairs on each subscription.

        A (trigger_time, sample_id) pair can be published once; a batch that
        repeats one is rejected whole and nothing is enqueued.
        Returns the number of message copies created.
        """
        items = list(items)
        with self._lock:
            ids = [sid for sid, _ in items]
            if len(set(ids)) != len(ids):
                raise DuplicatePublishError("sample ids repeat within the batch")
            clash = [sid for sid in ids if (trigger_time, sid) in self._keys]
            if clash:
                raise DuplicatePublishError(
                    f"{len(clash)} sample(s) already published at trigger {trigger_time}, e.g. {clash[0]!r}"
                )
            if callable(subscriptions):
                route = subscriptions
            else:
                names = self.subscriptions if subscriptions is None else list(subscriptions)
                route = lambda sid: names  # noqa: E731
            count = 0
            for sid, payload in items:
                self._keys.add((trigger_time, sid))
                for name in route(sid):
                    sub = self._subs[name]
                    sub.backlog.append(
                        Message(f"{name}:{trigger_time}:{sid}", sid, payload, trigger_time, name)
                    )
                    sub.published += 1
                    count += 1
            return count

    def publish_routed(self, trigger_time, items, route):
        """Like :meth:`publish` but ``route(sample_id)`` lists the subscriptions."""
        return self.publish(trigger_time, items, subscriptions=route)

    def pull(self, subscription, replica_id, now):
        with self._lock:
            self._expire(now)
            sub = self._subs[subscription]
            if not sub.backlog:
                return None
            msg = sub.backlog.popleft()
            msg.delivery_count += 1
            if msg.delivery_count > 1:
                self.redeliveries += 1
            deadline = now + self.visibility_timeout
            sub.in_flight[msg.message_id] = (msg, deadline)
            return Delivery(msg, msg.delivery_count, deadline)

    def _find(self, message_id):
        name = message_id.split(":", 1)[0]
        return self._subs.get(name)

    def ack(self, ack_id):
        """Acknowledge one delivery. Raises StaleAckError if it is no longer in flight."""
        with self._lock:
            message_id, _, delivery = ack_id.rpartition("@")
            sub = self._find(message_id)
            entry = sub.in_flight.get(message_id) if sub else None
            if entry is None or str(entry[0].delivery_count) != delivery:
                self.stale_acks += 1
                log.warning("stale ack %s", ack_id)
                raise StaleAckError(ack_id)
            msg, _ = sub.in_flight.pop(message_id)
            sub.acked[message_id] = msg

    def nack(self, ack_id):
        """Give a delivery back now instead of waiting for its deadline.

        Returns the message if that exhausted its deliveries and it was
        dead-lettered, else None.
        """
        with self._lock:
            message_id, _, delivery = ack_id.rpartition("@")
            sub = self._find(message_id)
            entry = sub.in_flight.get(message_id) if sub else None
            if entry is None or str(entry[0].delivery_count) != delivery:
                self.stale_acks += 1
                raise StaleAckError(ack_id)
            msg, _ = sub.in_flight.pop(message_id)
            return self._requeue(sub, msg)

    def _requeue(self, sub, msg):
        if msg.delivery_count >= self.max_deliveries:
            sub.dead[msg.message_id] = msg
            self._dead_events.append(msg)
            return msg
        sub.backlog.append(msg)
        return None

    def _expire(self, now):
        for sub in self._subs.values():
            due = [mid for mid, (_, deadline) in sub.in_flight.items() if deadline <= now]
            for mid in due:
                msg, _ = sub.in_flight.pop(mid)
                self._requeue(sub, msg)

    def expire(self, now):
        """Return overdue in-flight messages to the backlog (or dead-letter them)."""
        with self._lock:
            self._expire(now)

    def take_dead_letters(self):
        """Messages dead-lettered since the last call, oldest first."""
        with self._lock:
            out, self._dead_events = self._dead_events, []
            return out

    def backlog(self, subscription=None):
        with self._lock:
            subs = self._subs.values() if subscription is None else [self._subs[subscription]]
            return sum(len(s.backlog) for s in subs)

    def counts(self, subscription=None):
        with self._lock:
            subs = self._subs.values() if subscription is None else [self._subs[subscription]]
            return {
                "published": sum(s.published for s in subs),
                "backlog": sum(len(s.backlog) for s in subs),
                "in_flight": sum(len(s.in_flight) for s in subs),
                "acked": sum(len(s.acked) for s in subs),
                "dead": sum(len(s.dead) for s in subs),
            }

    def conserved(self):
        """published == backlog + in-flight + acked + dead-lettered, per subscription."""
        with self._lock:
            for name in self._subs:
                c = self.counts(name)
                if c["published"] != c["backlog"] + c["in_flight"] + c["acked"] + c["dead"]:
                    return False
            return True

    def drained(self):
        with self._lock:
            return all(not s.backlog and not s.in_flight for s in self._subs.values())

    def is_acked(self, message_id):
        with self._lock:
            sub = self._find(message_id)
            return sub is not None and message_id in sub.acked
