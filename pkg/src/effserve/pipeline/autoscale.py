"""Queue-depth autoscaling: replicas proportional to backlog, clamped, with a scale-down cooldown."""

import math
from dataclasses import dataclass

from ..errors import InvalidInputError


@dataclass(frozen=True)
class ScalingPolicy:
    target_backlog_per_replica: int = 10
    min_replicas: int = 1
    max_replicas: int = 20
    cooldown: int = 10
    poll_interval: int = 1

    def __post_init__(self):
        if self.target_backlog_per_replica < 1:
            raise InvalidInputError("target_backlog_per_replica must be >= 1")
        if not 0 <= self.min_replicas <= self.max_replicas:
            raise InvalidInputError("need 0 <= min_replicas <= max_replicas")
        if self.cooldown < 0 or self.poll_interval < 1:
            raise InvalidInputError("cooldown must be >= 0 and poll_interval >= 1")


def desired_replicas(policy, backlog):
    want = math.ceil(backlog / policy.target_backlog_per_replica)
    return max(policy.min_replicas, min(policy.max_replicas, want))


def autoscale_step(policy, backlog, current, now, last_scale_time=None):
    """Replica count to run after observing ``backlog`` at time ``now``.

    Scale-up is immediate; scale-down waits until ``cooldown`` has passed since
    the last change (``last_scale_time=None`` means there was none).
    """
    want = desired_replicas(policy, backlog)
    if want > current:
        return want
    if want < current:
        if last_scale_time is None or now - last_scale_time >= policy.cooldown:
            return want
    return current
