"""Reference solvers for small instances and the gap metric.

``exhaustive_solve`` searches the MDP of :mod:`mdroute.env` itself, so any
disagreement with ``enumerate_optimum`` (which knows nothing about the MDP and
only uses the stand-alone checker) points at a bug in the environment.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import env
from .checker import Solution, check_feasible, route_cost

MAX_EXHAUSTIVE_N = 8


@dataclass
class OracleResult:
    solution: Solution
    cost: float
    nodes_expanded: int


def exhaustive_solve(instance, max_n: int = MAX_EXHAUSTIVE_N) -> OracleResult:
    """Optimal solution over every feasible action sequence of the MDP.

    Depth-first search inside each route with pruning on accumulated cost;
    between routes the state depends only on the set of served customers, so
    the best completion per set is memoized.  Ties go to the
    lexicographically smallest action sequence.
    """
    if instance.n > max_n:
        raise ValueError(f"exhaustive search is limited to n <= {max_n} (got {instance.n})")
    m = instance.m
    full = (1 << instance.n) - 1
    memo: dict[int, tuple[float, tuple]] = {}
    counter = [0]

    def best_from(visited: int) -> tuple[float, tuple]:
        if visited == full:
            return 0.0, ()
        if visited in memo:
            return memo[visited]
        best = (math.inf, ())
        waiting = env.RolloutState(
            position=0, anchor=0, phase=env.AWAITING_ANCHOR, remaining_capacity=1.0,
            elapsed_time=0.0, route_length=0.0, visited=visited,
            open_flag=instance.flags.open, inter_depot_flag=instance.flags.inter_depot)
        mask = env.feasible_actions(instance, waiting)
        for depot in range(m):
            if not mask[depot]:
                continue
            start = env.step(instance, waiting, depot, check=False)
            counter[0] += 1
            best = _search_route(start, (depot,), best)
        memo[visited] = best
        return best

    def _search_route(state, prefix, best):
        mask = env.feasible_actions(instance, state)
        for a in range(len(mask)):
            if not mask[a]:
                continue
            nxt = env.step(instance, state, a, check=False)
            counter[0] += 1
            seq = prefix + (a,)
            if nxt.phase == env.ROUTE_ACTIVE:
                if nxt.cost > best[0]:
                    continue
                best = _search_route(nxt, seq, best)
            else:
                rest_cost, rest = best_from(nxt.visited)
                total = nxt.cost + rest_cost
                cand = (total, seq + rest)
                if total < best[0] or (total == best[0] and cand[1] < best[1]):
                    best = cand
        return best

    cost, actions = best_from(0)
    if not math.isfinite(cost):
        raise RuntimeError("no feasible solution found")
    actions = list(actions)
    exact = -env.reward(instance, actions)
    return OracleResult(Solution(actions, exact), exact, counter[0])


def greedy_solve(instance) -> Solution:
    """Nearest-feasible-customer construction under the environment mask.

    New routes open at the allowed depot nearest the centroid of the unserved
    customers; with inter-depot routes a vehicle that cannot serve anyone
    reloads at the nearest allowed depot before giving up the route.
    """
    m = instance.m
    dist = instance.dist
    coords = instance.customer_coords
    state = env.blank_state(instance)
    actions = []
    while state.phase != env.DONE:
        mask = np.array(env.feasible_actions(instance, state))
        if not mask.any():
            raise env.StuckError("greedy construction reached a state with no feasible action")
        if state.phase == env.AWAITING_ANCHOR:
            todo = [c for c in range(instance.n) if not state.visited >> c & 1]
            centroid = coords[todo].mean(axis=0)
            far = np.hypot(*(instance.depot_coords - centroid).T)
            a = int(np.argmin(np.where(mask[:m], far, np.inf)))
        else:
            row = dist[state.position]
            cust = mask[m:]
            if cust.any():
                a = m + int(np.argmin(np.where(cust, row[m:], np.inf)))
            else:
                reload = mask[:m].copy()
                reload[state.anchor] = False
                if reload.any():
                    a = int(np.argmin(np.where(reload, row[:m], np.inf)))
                else:
                    a = state.anchor
        actions.append(a)
        state = env.step(instance, state, a)
    return Solution(actions, -env.reward(instance, actions))


def gap(obj: float, reference: float) -> float:
    """Percentage gap of ``obj`` above ``reference``."""
    if not reference > 0:
        raise ValueError("reference cost must be positive")
    return 100.0 * (obj - reference) / reference


def enumerate_optimum(instance) -> tuple[float, Solution]:
    """Optimum over plain routes (no reloads) by explicit enumeration.

    Every ordered subset of customers is tried as a route from every depot
    and scored with the stand-alone checker; the best partition of the
    customers into such routes is then found over subsets.  No environment
    code is involved.
    """
    m, n = instance.m, instance.n
    best_route: dict[int, tuple[float, list[int]]] = {}
    customers = range(m, m + n)
    for k in range(1, n + 1):
        for perm in itertools.permutations(customers, k):
            key = 0
            for c in perm:
                key |= 1 << (c - m)
            for depot in range(m):
                route = [depot, *perm, depot]
                cost = route_cost(instance, route)
                if cost is None:
                    continue
                cur = best_route.get(key)
                if cur is None or cost < cur[0]:
                    best_route[key] = (cost, route)
    full = (1 << n) - 1
    best = [math.inf] * (full + 1)
    choice: list = [None] * (full + 1)
    best[0] = 0.0
    for s in range(1, full + 1):
        low = s & -s  # the lowest customer left must be in some route
        sub = s
        while sub:
            if sub & low and sub in best_route:
                c = best_route[sub][0] + best[s ^ sub]
                if c < best[s]:
                    best[s], choice[s] = c, sub
            sub = (sub - 1) & s
    if not math.isfinite(best[full]):
        raise RuntimeError("no feasible plain-route solution")
    actions = []
    s = full
    while s:
        sub = choice[s]
        actions.extend(best_route[sub][1])
        s ^= sub
    verdict = check_feasible(instance, actions)
    return verdict.cost, Solution(actions, verdict.cost)
