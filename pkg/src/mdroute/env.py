"""Route-construction MDP: per-trajectory state, feasibility masks and transitions.

A solution is built one route at a time.  A route starts at its anchor depot,
serves customers (optionally reloading at other depots when inter-depot
routes are allowed) and is closed by selecting the anchor again; the next
action then picks the anchor of the following route.

Capacity is tracked in raw demand units per loading segment (route start or
reload).  A vehicle leaves with every delivery of the segment on board, so
its peak load is ``delivered + max_prefix(picked - delivered)``; the running
maximum is kept incrementally in ``excess``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .instances import Instance

ROUTE_ACTIVE = "route_active"
AWAITING_ANCHOR = "awaiting_anchor"
DONE = "done"


class InfeasibleActionError(ValueError):
    pass


class StuckError(RuntimeError):
    """A reachable state with no feasible action (masking failed to guarantee progress)."""


@dataclass(frozen=True, slots=True)
class RolloutState:
    position: int
    anchor: int
    phase: str
    remaining_capacity: float
    elapsed_time: float
    route_length: float
    visited: int  # bit c set once customer m+c is served
    open_flag: bool
    inter_depot_flag: bool
    step: int = 0
    cost: float = 0.0
    served_in_route: int = 0
    backhaul_in_route: bool = False
    delivered: int = 0
    net: int = 0
    excess: int = 0


@dataclass
class Trajectory:
    actions: list[int]
    step_logprobs: list[float]
    cost: float = math.nan

    @property
    def logprob(self) -> float:
        return math.fsum(self.step_logprobs)


class _Data:
    """Python-scalar copy of an instance for the hot loops."""

    __slots__ = ("m", "n", "dist", "q", "backhaul", "cap", "early", "late", "service",
                 "close", "limit", "open", "inter", "strict", "tw", "full")

    def __init__(self, inst: Instance):
        f = inst.flags
        self.m, self.n = inst.m, inst.n
        self.dist = inst.dist.tolist()
        self.q = [int(v) for v in inst.raw_demand]
        self.backhaul = [bool(v) for v in inst.is_backhaul]
        self.cap = int(inst.capacity)
        self.tw = f.time_window
        if self.tw:
            self.early = [float(v) for v in inst.tw_early]
            self.late = [float(v) for v in inst.tw_late]
            self.service = [float(v) for v in inst.service_time]
            self.close = float(inst.depot_close)
        self.limit = float(inst.route_limit) if f.limit else None
        self.open = f.open
        self.inter = f.inter_depot
        self.strict = f.backhaul and f.backhaul_mode == "strict"
        self.full = (1 << self.n) - 1


def _data(inst: Instance) -> _Data:
    d = inst.__dict__.get("_env_data")
    if d is None:
        d = _Data(inst)
        inst.__dict__["_env_data"] = d
    return d


def _customer_ok(D, c, pos, anchor, time, length, delivered, net, excess, bh_in_route):
    """Whether customer index c (0-based) can be served next."""
    q = D.q[c]
    if D.backhaul[c]:
        if delivered + max(excess, net + q) > D.cap:
            return False
    else:
        if D.strict and bh_in_route:
            return False
        if delivered + q + excess > D.cap:
            return False
    node = D.m + c
    row = D.dist[pos]
    d = row[node]
    back = 0.0 if D.open else D.dist[node][anchor]
    if D.limit is not None and length + d + back > D.limit:
        return False
    if D.tw:
        start = time + d
        if start < D.early[c]:
            start = D.early[c]
        if start > D.late[c]:
            return False
        if not D.open and start + D.service[c] + back > D.close:
            return False
    return True


def _any_customer(D, visited, pos, anchor, time, length, delivered, net, excess, bh):
    for c in range(D.n):
        if not visited >> c & 1 and _customer_ok(D, c, pos, anchor, time, length,
                                                 delivered, net, excess, bh):
            return True
    return False


def blank_state(instance: Instance) -> RolloutState:
    """State before the first anchor is chosen (nothing served)."""
    f = instance.flags
    return RolloutState(position=0, anchor=0, phase=AWAITING_ANCHOR, remaining_capacity=1.0,
                        elapsed_time=0.0, route_length=0.0, visited=0,
                        open_flag=f.open, inter_depot_flag=f.inter_depot)


def route_start_state(instance: Instance, depot: int, prev: RolloutState | None = None) -> RolloutState:
    f = instance.flags
    return RolloutState(
        position=depot, anchor=depot, phase=ROUTE_ACTIVE, remaining_capacity=1.0,
        elapsed_time=0.0, route_length=0.0,
        visited=prev.visited if prev else 0,
        open_flag=f.open, inter_depot_flag=f.inter_depot,
        step=prev.step + 1 if prev else 0,
        cost=prev.cost if prev else 0.0,
    )


def feasible_actions(instance: Instance, state: RolloutState, allow_vacuous_reload: bool = False) -> list[bool]:
    """Boolean mask over all m+n nodes."""
    if state.phase == DONE:
        raise ValueError("no actions from a finished rollout")
    D = _data(instance)
    m = D.m
    mask = [False] * (m + D.n)
    if state.phase == AWAITING_ANCHOR:
        for d in range(m):
            mask[d] = _any_customer(D, state.visited, d, d, 0.0, 0.0, 0, 0, 0, False)
        return mask

    pos, anchor = state.position, state.anchor
    t, ln = state.elapsed_time, state.route_length
    dl, net, ex, bh = state.delivered, state.net, state.excess, state.backhaul_in_route
    visited = state.visited
    any_c = False
    for c in range(D.n):
        if not visited >> c & 1 and _customer_ok(D, c, pos, anchor, t, ln, dl, net, ex, bh):
            mask[m + c] = True
            any_c = True
    at_depot = pos < m
    if at_depot:
        # start of a route or right after a reload: no depot-to-depot move
        mask[anchor] = not any_c
        return mask
    mask[anchor] = True
    if D.inter and (allow_vacuous_reload or dl + ex > 0):
        row = D.dist[pos]
        for x in range(m):
            if x == anchor:
                continue
            d = row[x]
            if _any_customer(D, visited, x, anchor, t + d, ln + d, 0, 0, 0, bh):
                mask[x] = True
    return mask


def step(instance: Instance, state: RolloutState, action: int, check: bool = True) -> RolloutState:
    action = int(action)
    if check:
        if state.phase == DONE:
            raise InfeasibleActionError("rollout already finished")
        if not 0 <= action < instance.n_nodes or not feasible_actions(instance, state, True)[action]:
            raise InfeasibleActionError(f"action {action} is not feasible in phase {state.phase}")
    D = _data(instance)
    m = D.m
    cap = D.cap
    if state.phase == AWAITING_ANCHOR:
        return route_start_state(instance, action, state)

    pos, anchor = state.position, state.anchor
    if action >= m:
        c = action - m
        d = D.dist[pos][action]
        q = D.q[c]
        dl, net, ex = state.delivered, state.net, state.excess
        bh = state.backhaul_in_route
        if D.backhaul[c]:
            net += q
            ex = max(ex, net)
            bh = True
        else:
            dl += q
            net -= q
        t = state.elapsed_time + d
        if D.tw:
            t = max(t, D.early[c]) + D.service[c]
        return RolloutState(
            position=action, anchor=anchor, phase=ROUTE_ACTIVE,
            remaining_capacity=(cap - dl - ex) / cap,
            elapsed_time=t, route_length=state.route_length + d,
            visited=state.visited | (1 << c),
            open_flag=state.open_flag, inter_depot_flag=state.inter_depot_flag,
            step=state.step + 1, cost=state.cost + d,
            served_in_route=state.served_in_route + 1, backhaul_in_route=bh,
            delivered=dl, net=net, excess=ex,
        )
    if action == anchor:
        d = 0.0 if D.open else D.dist[pos][action]
        done = state.visited == D.full
        return RolloutState(
            position=action, anchor=anchor, phase=DONE if done else AWAITING_ANCHOR,
            remaining_capacity=state.remaining_capacity,
            elapsed_time=state.elapsed_time + d, route_length=state.route_length + d,
            visited=state.visited,
            open_flag=state.open_flag, inter_depot_flag=state.inter_depot_flag,
            step=state.step + 1, cost=state.cost + d,
            served_in_route=state.served_in_route, backhaul_in_route=state.backhaul_in_route,
            delivered=state.delivered, net=state.net, excess=state.excess,
        )
    # reload at another depot
    d = D.dist[pos][action]
    return RolloutState(
        position=action, anchor=anchor, phase=ROUTE_ACTIVE, remaining_capacity=1.0,
        elapsed_time=state.elapsed_time + d, route_length=state.route_length + d,
        visited=state.visited,
        open_flag=state.open_flag, inter_depot_flag=state.inter_depot_flag,
        step=state.step + 1, cost=state.cost + d,
        served_in_route=state.served_in_route, backhaul_in_route=state.backhaul_in_route,
    )


def init_rollouts(instance: Instance, mode: str = "train") -> list[tuple[RolloutState, list[int]]]:
    """POMO starting points as (state, actions taken so far).

    ``train``: anchors 1..m-1 with a free first choice, then one start per
    customer departing from depot 0 (m+n-1 in total).  ``inference``: every
    (depot, first customer) pair (m*n in total).
    """
    m, n = instance.m, instance.n
    starts = []
    if mode == "train":
        for d in range(1, m):
            starts.append((route_start_state(instance, d), [d]))
        pairs = [(0, m + c) for c in range(n)]
    elif mode in ("inference", "full"):
        pairs = [(d, m + c) for d in range(m) for c in range(n)]
    else:
        raise ValueError(f"unknown start mode {mode!r}")
    for d, k in pairs:
        s0 = route_start_state(instance, d)
        starts.append((step(instance, s0, k), [d, k]))
    return starts


def start_count(n: int, m: int, mode: str = "train") -> int:
    return m + n - 1 if mode == "train" else m * n


def reward(instance: Instance, trajectory) -> float:
    actions = trajectory.actions if isinstance(trajectory, Trajectory) else list(trajectory)
    if not actions:
        raise ValueError("incomplete trajectory")
    seen = 0
    for a in actions:
        if a >= instance.m:
            seen |= 1 << (a - instance.m)
    if seen != (1 << instance.n) - 1 or actions[-1] >= instance.m:
        raise ValueError("incomplete trajectory")
    return -_legs_cost(instance, actions)


def _legs_cost(instance: Instance, actions) -> float:
    D = _data(instance)
    legs = []
    i = 0
    while i < len(actions):
        anchor = actions[i]
        j = i + 1
        while j < len(actions) and actions[j] != anchor:
            legs.append(D.dist[actions[j - 1]][actions[j]])
            j += 1
        if j == len(actions):
            raise ValueError("incomplete trajectory")
        if not D.open:
            legs.append(D.dist[actions[j - 1]][anchor])
        i = j + 1
    return math.fsum(legs)


def stack_states(instance: Instance, states, allow_vacuous_reload=False):
    """Decoder inputs for a list of states of one instance.

    Returns (prev node, context scalars (k, 5), mask (k, m+n), done flags).
    Finished states get a dummy mask selecting node 0.
    """
    k = len(states)
    prev = np.zeros(k, dtype=np.int64)
    ctx = np.zeros((k, 5))
    mask = np.zeros((k, instance.n_nodes), dtype=bool)
    done = np.zeros(k, dtype=bool)
    for i, s in enumerate(states):
        prev[i] = s.position
        ctx[i] = context_scalars(instance, s)
        if s.phase == DONE:
            done[i] = True
            mask[i, 0] = True
        else:
            mask[i] = feasible_actions(instance, s, allow_vacuous_reload)
    return prev, ctx, mask, done


def context_scalars(instance: Instance, s: RolloutState) -> tuple:
    """(remaining capacity, time, length, open, inter-depot) for the decoder query."""
    f = instance.flags
    t = s.elapsed_time / instance.depot_close if f.time_window else 0.0
    ln = s.route_length / instance.route_limit if f.limit else 0.0
    return (s.remaining_capacity, t, ln, float(s.open_flag), float(s.inter_depot_flag))
