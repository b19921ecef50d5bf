"""Batched policy rollouts over the routing MDP."""

from __future__ import annotations

import numpy as np

from . import env
from .autodiff import Var, as_var
from .checker import check_feasible
from .policy import PolicyConfig, decode_batch, encode_batch, instance_inputs, precompute, select_batch


def rollout_batch(instances, params, cfg: PolicyConfig, mode: str = "greedy", rng=None,
                  starts: str = "train", allow_vacuous_reload: bool = False, verify: bool = False,
                  forced=None):
    """Roll out every POMO start of every instance to completion.

    ``params`` may hold arrays or tracked Vars.  Returns the trajectories
    (one list per instance) and the summed log-probability of each
    trajectory as a (B, N) Var, differentiable when ``params`` are tracked.
    With ``forced`` (per instance, per start: a full action list) the given
    actions are replayed instead of chosen, which scores fixed trajectories.
    """
    if forced is not None:
        mode = "forced"
    elif mode not in ("greedy", "sample"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs a random generator")
    shapes = {(i.n, i.m) for i in instances}
    if len(shapes) != 1:
        raise ValueError("a rollout batch needs instances of one size")
    P = {k: as_var(v) for k, v in params.items()}
    B = len(instances)
    H = encode_batch(*instance_inputs(instances), P, cfg)
    cache = precompute(H, P, cfg)

    init = [env.init_rollouts(inst, starts) for inst in instances]
    N = len(init[0])
    states = [[s for s, _ in row] for row in init]
    actions = [[list(a) for _, a in row] for row in init]
    step_lp = [[[] for _ in range(N)] for _ in range(B)]
    V = instances[0].n_nodes
    max_steps = 4 * (instances[0].n + 1) * max(1, instances[0].m) + 8
    total = None
    bi, ni = np.meshgrid(np.arange(B), np.arange(N), indexing="ij")

    for _ in range(max_steps):
        prev = np.zeros((B, N), dtype=np.int64)
        ctx = np.zeros((B, N, 5))
        mask = np.zeros((B, N, V), dtype=bool)
        done = np.zeros((B, N), dtype=bool)
        for b, inst in enumerate(instances):
            prev[b], ctx[b], mask[b], done[b] = env.stack_states(inst, states[b], allow_vacuous_reload)
        if done.all():
            break
        live = ~done
        stuck = live & ~mask.any(axis=-1)
        if stuck.any():
            b, j = map(int, np.argwhere(stuck)[0])
            raise env.StuckError(f"no feasible action for instance {b}, trajectory {j}")
        logp = decode_batch(cache, prev, ctx, mask, P, cfg)
        if not np.isfinite(logp.value[mask & live[..., None]]).all():
            raise FloatingPointError("non-finite log-probabilities from the decoder")
        probs = np.exp(logp.value).reshape(B * N, V)
        if forced is None:
            act = select_batch(probs, mode, rng).reshape(B, N)
        else:
            act = np.zeros((B, N), dtype=np.int64)
            for b, j in zip(*np.nonzero(live)):
                act[b, j] = forced[b][j][len(actions[b][j])]
                if not mask[b, j, act[b, j]]:
                    raise env.InfeasibleActionError(f"forced action {act[b, j]} is masked")
        chosen = logp[bi, ni, act] * live.astype(float)
        total = chosen if total is None else total + chosen
        chosen_v = chosen.value
        for b, inst in enumerate(instances):
            row = states[b]
            for j in range(N):
                if live[b, j]:
                    a = int(act[b, j])
                    row[j] = env.step(inst, row[j], a, check=False)
                    actions[b][j].append(a)
                    step_lp[b][j].append(float(chosen_v[b, j]))
    else:
        raise env.StuckError("rollout exceeded its step budget")

    if total is None:
        total = Var(np.zeros((B, N)))
    trajs = []
    for b, inst in enumerate(instances):
        row = []
        for j in range(N):
            t = env.Trajectory(actions[b][j], step_lp[b][j], -env.reward(inst, actions[b][j]))
            if verify:
                verdict = check_feasible(inst, t.actions)
                if not verdict.ok:
                    raise AssertionError(f"infeasible rollout: {verdict.reason} at step {verdict.step}")
            row.append(t)
        trajs.append(row)
    return trajs, total


def rollout(instance, params, cfg: PolicyConfig, mode: str = "greedy", rng=None, starts: str = "train"):
    """Trajectories of one instance from all of its POMO starts."""
    trajs, _ = rollout_batch([instance], params, cfg, mode, rng, starts)
    return trajs[0]


def score(instances, trajectories, params, cfg: PolicyConfig, starts: str = "train"):
    """Summed log-probabilities (B, N) of fixed trajectories under ``params``."""
    forced = [[t.actions if hasattr(t, "actions") else list(t) for t in row] for row in trajectories]
    _, logp = rollout_batch(instances, params, cfg, starts=starts, forced=forced)
    return logp


def best_solutions(instances, params, cfg: PolicyConfig, starts: str = "train", augment8: bool = False,
                   chunk: int = 64) -> list[tuple[float, list[int]]]:
    """Cheapest greedy trajectory per instance over all starts (and the 8 dihedral views).

    Augmentation moves coordinates only, so the winning action sequence is
    valid on the original instance and is returned with its original cost.
    """
    from .instances import augment

    best: list = [None] * len(instances)
    groups: dict[tuple, list[int]] = {}
    for i, inst in enumerate(instances):
        groups.setdefault((inst.n, inst.m), []).append(i)
    maps = range(8) if augment8 else range(1)
    for k in maps:
        for idx in groups.values():
            for lo in range(0, len(idx), chunk):
                part = idx[lo:lo + chunk]
                trajs, _ = rollout_batch([augment(instances[i], k) for i in part], params, cfg,
                                         "greedy", starts=starts)
                for i, row in zip(part, trajs):
                    t = min(row, key=lambda t: t.cost)
                    if best[i] is None or t.cost < best[i][0]:
                        best[i] = (t.cost, t.actions)
    return [(-env.reward(inst, a), a) for inst, (_, a) in zip(instances, best)]


def best_cost(instances, params, cfg: PolicyConfig, starts: str = "train", augment8: bool = False,
              chunk: int = 64) -> np.ndarray:
    """Minimum greedy cost per instance over all starts (and augmentations)."""
    return np.array([c for c, _ in best_solutions(instances, params, cfg, starts, augment8, chunk)])
