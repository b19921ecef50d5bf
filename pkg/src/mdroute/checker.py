"""Stand-alone solution validator.

Re-derives every routing rule from the instance data alone.  Nothing here is
shared with :mod:`mdroute.env`, so the two can be cross-checked against each
other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

TOL = 1e-9


@dataclass
class Solution:
    actions: list[int]
    cost: float = 0.0


@dataclass
class Verdict:
    ok: bool
    reason: str = ""
    route: int | None = None
    step: int | None = None
    cost: float = math.nan
    routes: list[list[int]] = field(default_factory=list)

    def __bool__(self):
        return self.ok


class _Fail(Exception):
    def __init__(self, reason, step):
        super().__init__(reason)
        self.reason = reason
        self.step = step


def _point(instance, node):
    m = instance.m
    if node < m:
        return tuple(instance.depot_coords[node])
    return tuple(instance.customer_coords[node - m])


def _leg(instance, a, b):
    (ax, ay), (bx, by) = _point(instance, a), _point(instance, b)
    return math.hypot(ax - bx, ay - by)


def split_routes(instance, actions):
    """Split an action list into routes ``[anchor, ..., anchor]``.

    Raises ValueError on indices outside the node range or an unterminated tail.
    """
    n_nodes = instance.m + instance.n
    for a in actions:
        if not isinstance(a, (int,)) and not hasattr(a, "__index__"):
            raise ValueError(f"non-integer action {a!r}")
        if not 0 <= int(a) < n_nodes:
            raise ValueError(f"node index {a} outside 0..{n_nodes - 1}")
    routes, starts = [], []
    i = 0
    while i < len(actions):
        anchor = int(actions[i])
        if anchor >= instance.m:
            raise ValueError(f"route starting at step {i} does not start at a depot")
        j = i + 1
        while j < len(actions) and int(actions[j]) != anchor:
            j += 1
        if j == len(actions):
            raise ValueError(f"route starting at step {i} is never terminated")
        routes.append([int(a) for a in actions[i:j + 1]])
        starts.append(i)
        i = j + 1
    return routes, starts


def route_legs(instance, route, first_step=0):
    """Costed legs of one route ``[anchor, ..., anchor]``; raises _Fail on a violation."""
    flags = instance.flags
    m = instance.m
    legs = []
    time = 0.0
    length = 0.0
    seen_backhaul = False
    segment = []  # (step, signed raw demand) since the last (re)load
    last = len(route) - 1
    if last < 2:
        raise _Fail("empty route", first_step + last)

    def check_segment():
        limit = instance.capacity
        onboard = sum(q for _, q in segment if q > 0)  # departs with all deliveries
        delivered = 0
        for s, q in segment:
            if q > 0:
                delivered += q
                if delivered > limit:
                    raise _Fail("capacity exceeded", s)
                onboard -= q
            else:
                onboard -= q
                if onboard > limit:
                    raise _Fail("capacity exceeded", s)

    for k in range(1, last + 1):
        prev, node = route[k - 1], route[k]
        step = first_step + k
        if prev < m and node < m:
            raise _Fail("depot-to-depot move", step)
        final = k == last
        d = _leg(instance, prev, node)
        if not (final and flags.open):
            legs.append(d)
            length += d
            time += d
        if node >= m:
            c = node - m
            q = int(instance.raw_demand[c])
            if instance.is_backhaul[c]:
                seen_backhaul = True
                q = -q
            elif seen_backhaul and flags.backhaul and flags.backhaul_mode == "strict":
                raise _Fail("linehaul served after backhaul", step)
            segment.append((step, q))
            if flags.time_window:
                if time > instance.tw_late[c] + TOL:
                    raise _Fail("time window missed", step)
                time = max(time, float(instance.tw_early[c])) + float(instance.service_time[c])
        else:
            if not final:
                if not flags.inter_depot:
                    raise _Fail("intermediate depot visit without inter-depot routes", step)
            check_segment()
            segment = []
            if flags.time_window and not flags.open and time > instance.depot_close + TOL:
                raise _Fail("depot closing time exceeded", step)
        if flags.limit and length > instance.route_limit + TOL:
            raise _Fail("route length limit exceeded", step)
    return legs


def check_feasible(instance, solution) -> Verdict:
    actions = solution.actions if isinstance(solution, Solution) else list(solution)
    if not actions:
        raise ValueError("empty solution")
    routes, starts = split_routes(instance, actions)
    served = {}
    legs = []
    for r, (route, start) in enumerate(zip(routes, starts)):
        for k, node in enumerate(route[1:-1], start=1):
            if node < instance.m:
                continue
            if node in served:
                return Verdict(False, f"customer {node} served twice", r, start + k)
            served[node] = r
        try:
            legs.extend(route_legs(instance, route, start))
        except _Fail as e:
            return Verdict(False, e.reason, r, e.step)
    missing = [c for c in range(instance.m, instance.m + instance.n) if c not in served]
    if missing:
        return Verdict(False, f"customers never served: {missing}", None, None)
    return Verdict(True, "", cost=math.fsum(legs), routes=routes)


def route_cost(instance, route):
    """Cost of a single route, or None when it violates any rule."""
    try:
        return math.fsum(route_legs(instance, route))
    except _Fail:
        return None
