"""Command line interface: ``mdroute {gen,train,eval,oracle,check,gradcheck}``.

Every option can also be set through an environment variable named
``MDROUTE_<OPTION>`` (upper case, dashes as underscores), e.g.
``MDROUTE_SEED=3`` or ``MDROUTE_THREADS=4``.  Explicit flags win over the
environment, which wins over built-in defaults.

Each command prints its report and then, as the very last stdout line, a
``summary`` line of ``key=value`` pairs.  Exit status is 0 on success, 1 when
an audit or evaluation fails and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import env
from .autodiff import finite_diff_check
from .checker import check_feasible
from .fileio import (ParseError, format_instance, format_oracle_results, format_trajectories,
                     parse_instance, read_checkpoint, write_instance)
from .instances import VARIANT_NAMES, VariantFlags, audit_instance, generate_instance, make_rng
from .oracle import MAX_EXHAUSTIVE_N, exhaustive_solve, gap, greedy_solve
from .policy import PolicyConfig, init_params
from .rollout import best_solutions, rollout_batch, score
from .training import LOSSES, Sampler, TrainConfig, train

ENV_PREFIX = "MDROUTE_"
EVAL_CHUNK = 32


class UsageError(Exception):
    pass


def _summary(command, status, **fields):
    parts = [f"command={command}", f"status={status}"]
    for k, v in fields.items():
        parts.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
    print("summary " + " ".join(parts))


def _map(fn, items, threads):
    """Ordered map, optionally over a thread pool; output order never depends on threads."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _instance_files(directory):
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"instance directory {directory!r} does not exist")
    files = sorted(d.glob("*.txt"))
    if not files:
        raise UsageError(f"no instance files (*.txt) in {directory!r}")
    return files


def _load(files, threads):
    return _map(lambda f: parse_instance(f.read_text()), files, threads)


# -- gen -------------------------------------------------------------------

def cmd_gen(a):
    try:
        flags = VariantFlags.from_name(a.variant)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if a.count < 1 or a.n < 1 or a.m < 1:
        raise UsageError("count, n and m must be positive")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = make_rng(a.seed).integers(0, 2**63, size=a.count)
    stem = flags.token.replace(":", "-")
    for i, s in enumerate(seeds):
        inst = generate_instance(a.n, a.m, flags, int(s))
        write_instance(inst, out / f"{stem}_n{a.n}_m{a.m}_{i:04d}.txt")
    print(f"wrote {a.count} {flags.token} instances (n={a.n}, m={a.m}) to {out}")
    _summary("gen", "ok", count=a.count, variant=flags.token, out=str(out))
    return 0


# -- train -----------------------------------------------------------------

_TRAIN_KEYS = ("n", "m", "epochs", "instances_per_epoch", "batch_size", "loss", "alpha", "lr",
               "weight_decay", "multistep", "sampler", "variants", "mixed", "starts", "seed", "d",
               "heads", "layers", "ff_hidden", "clip", "film_identity", "checkpoint_every")


def _load_params(path, expect_cfg: PolicyConfig | None = None):
    """Checkpoint parameters plus the policy config recorded in its header."""
    try:
        params, hyper = read_checkpoint(path)
    except (OSError, ParseError) as e:
        raise UsageError(f"cannot read checkpoint {path}: {e}") from None
    try:
        cfg = PolicyConfig(**{k: hyper[k] for k in ("d", "heads", "layers", "ff_hidden", "clip")})
    except KeyError as e:
        raise UsageError(f"checkpoint header lacks hyperparameter {e}") from None
    ref = init_params(cfg, 0)
    if set(ref) != set(params):
        missing = sorted(set(ref) ^ set(params))
        raise UsageError(f"checkpoint tensors do not match its header: {missing[:3]}")
    for k, v in ref.items():
        if params[k].shape != v.shape:
            raise UsageError(f"checkpoint/header mismatch: {k} has shape {params[k].shape}, "
                             f"header implies {v.shape}")
    if expect_cfg is not None and expect_cfg != cfg:
        raise UsageError(f"checkpoint was trained with {cfg}, requested {expect_cfg}")
    return params, cfg


def cmd_train(a):
    conf = {}
    if a.config:
        try:
            conf = json.loads(Path(a.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {a.config}: {e}") from None
        if not isinstance(conf, dict):
            raise UsageError("a config file must hold a JSON object")
    for k in _TRAIN_KEYS:
        v = getattr(a, k, None)
        if v is not None:
            conf[k] = v
    if isinstance(conf.get("variants"), str):
        conf["variants"] = tuple(x for x in conf["variants"].split(",") if x)
    if a.init:
        init, _ = _load_params(a.init)
        conf["init_params"] = init
    out = Path(a.out)
    conf["checkpoint"] = str(out)
    conf["metrics"] = a.metrics or str(out.with_suffix(".tsv"))
    try:
        config = TrainConfig.from_dict(conf)
        Sampler(config.sampler, max(config.epochs, 1), config.variants)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid training config: {e}") from None
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    result = train(config, log=print)
    last = result.metrics[-1] if result.metrics else None
    _summary("train", "ok", epochs=config.epochs, checkpoint=str(out), metrics=config.metrics,
             final_mean_cost=last[4] if last else float("nan"))
    return 0


# -- eval ------------------------------------------------------------------

def _reference(inst):
    if inst.n <= MAX_EXHAUSTIVE_N:
        return exhaustive_solve(inst).cost, "exhaustive"
    return greedy_solve(inst).cost, "greedy"


def cmd_eval(a):
    params, cfg = _load_params(a.checkpoint)
    files = _instance_files(a.instances)
    insts = _load(files, a.threads)
    # fixed chunks so that batch composition (and every float) ignores --threads
    shards = [list(range(i, min(i + EVAL_CHUNK, len(insts)))) for i in range(0, len(insts), EVAL_CHUNK)]
    found = _map(lambda s: best_solutions([insts[i] for i in s], params, cfg, a.starts, a.augment8),
                 shards, a.threads)
    best = [None] * len(insts)
    for s, res in zip(shards, found):
        for i, r in zip(s, res):
            best[i] = r
    refs = _map(_reference, insts, a.threads)
    print("instance\tcost\treference\tref_kind\tgap_pct")
    gaps = []
    for f, (cost, _), (ref, kind) in zip(files, best, refs):
        g = gap(cost, ref)
        gaps.append(g)
        print(f"{f.name}\t{cost!r}\t{ref!r}\t{kind}\t{g:.4f}")
    if a.out:
        Path(a.out).write_text(format_trajectories((f.stem, c, acts) for f, (c, acts) in zip(files, best)))
    mean_cost = math.fsum(c for c, _ in best) / len(best)
    mean_gap = math.fsum(gaps) / len(gaps)
    status = "ok" if math.isfinite(mean_gap) else "fail"
    kinds = sorted({k for _, k in refs})
    _summary("eval", status, instances=len(insts), starts=a.starts, augment8=int(a.augment8),
             start_count=env.start_count(insts[0].n, insts[0].m, a.starts),
             mean_cost=mean_cost, mean_gap_pct=mean_gap, reference="+".join(kinds))
    return 0 if status == "ok" else 1


# -- oracle ----------------------------------------------------------------

def cmd_oracle(a):
    files = _instance_files(a.instances)
    insts = _load(files, a.threads)

    def solve(inst):
        if a.solver == "greedy":
            sol = greedy_solve(inst)
            return sol.cost, 0, sol.actions
        if inst.n > MAX_EXHAUSTIVE_N:
            raise UsageError(f"exhaustive search needs n <= {MAX_EXHAUSTIVE_N}, got {inst.n}")
        res = exhaustive_solve(inst)
        return res.cost, res.nodes_expanded, res.solution.actions

    results = _map(solve, insts, a.threads)
    rows = [(f.stem, c, e, acts) for f, (c, e, acts) in zip(files, results)]
    bad = [f.name for f, inst, (_, _, acts) in zip(files, insts, results) if not check_feasible(inst, acts).ok]
    print("instance\tcost\tnodes_expanded")
    for ident, c, e, _ in rows:
        print(f"{ident}\t{c!r}\t{e}")
    if a.out:
        Path(a.out).write_text(format_oracle_results(rows))
    for name in bad:
        print(f"infeasible oracle solution for {name}")
    _summary("oracle", "fail" if bad else "ok", instances=len(rows), solver=a.solver,
             mean_cost=math.fsum(r[1] for r in rows) / len(rows))
    return 1 if bad else 0


# -- check -----------------------------------------------------------------

def _audit_file(path):
    """First failing property for one file, or None."""
    text = path.read_text()
    try:
        inst = parse_instance(text)
    except ParseError as e:
        return "parse", str(e)
    bad = audit_instance(inst)
    if bad:
        return bad[0]
    again = format_instance(inst)
    if again != text:
        return "round-trip-bytes", "rewriting the parsed instance changes the file"
    if parse_instance(again) != inst:
        return "round-trip-fields", "re-reading the written instance changes a field"
    try:
        sol = greedy_solve(inst)
    except env.StuckError as e:
        return "greedy-completes", str(e)
    verdict = check_feasible(inst, sol.actions)
    if not verdict.ok:
        return "greedy-feasible", verdict.reason
    return None


def cmd_check(a):
    files = _instance_files(a.instances)
    results = _map(_audit_file, files, a.threads)
    failures = [(f, r) for f, r in zip(files, results) if r is not None]
    for f, (name, detail) in failures:
        print(f"FAIL {f.name}: invariant {name}: {detail}")
    print(f"checked {len(files)} files, {len(failures)} failing")
    if failures:
        _summary("check", "fail", files=len(files), failures=len(failures), first_failure=failures[0][1][0])
        return 1
    _summary("check", "ok", files=len(files), failures=0)
    return 0


# -- gradcheck -------------------------------------------------------------

def gradcheck_reports(d=8, heads=2, layers=2, n=4, m=2, variant="MDVRP", seed=0, alpha=0.03,
                      coords=200, tolerance=1e-4):
    """Finite-difference audits of both losses on one small instance."""
    cfg = PolicyConfig(d=d, heads=heads, layers=layers, ff_hidden=4 * d)
    params = init_params(cfg, seed)
    inst = generate_instance(n, m, VariantFlags.from_name(variant), seed)
    trajs, _ = rollout_batch([inst], params, cfg, "sample", make_rng(seed))
    rewards = np.array([[-t.cost for t in trajs[0]]])
    out = {}
    for name in ("reinforce", "po"):
        loss = LOSSES[name]
        out[name] = finite_diff_check(lambda P: loss(score([inst], trajs, P, cfg), rewards, alpha),
                                      params, n_coords=coords, tolerance=tolerance, seed=seed)
    return out


def cmd_gradcheck(a):
    reports = gradcheck_reports(a.d, a.heads, a.layers, a.n, a.m, a.variant, a.seed, a.alpha, a.coords)
    for name, rep in reports.items():
        print(f"{name}: {rep}")
    worst = max(r.max_rel_error for r in reports.values())
    ok = all(r.ok for r in reports.values())
    _summary("gradcheck", "ok" if ok else "fail", max_rel_error=f"{worst:.3e}",
             reinforce=f"{reports['reinforce'].max_rel_error:.3e}", po=f"{reports['po'].max_rel_error:.3e}")
    return 0 if ok else 1


# -- parser ----------------------------------------------------------------

def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="default 0")
    common.add_argument("--threads", type=int, default=1, help="instance-level worker threads")
    common.add_argument("--format", choices=["text"], default="text")

    p = argparse.ArgumentParser(prog="mdroute", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate an instance corpus")
    g.add_argument("--n", type=int, default=6)
    g.add_argument("--m", type=int, default=2)
    g.add_argument("--variant", default="MDVRP", help=f"one of {', '.join(VARIANT_NAMES)} (':strict' allowed)")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a policy")
    defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    for k in _TRAIN_KEYS:
        flag = "--" + k.replace("_", "-")
        v = defaults[k]
        if k == "seed":
            continue
        if isinstance(v, bool):
            t.add_argument(flag, type=_bool, nargs="?", const=True, default=None, help=f"default {v}")
        elif k == "variants":
            t.add_argument(flag, default=None, help="comma separated names for --sampler fixed")
        elif k == "loss":
            t.add_argument(flag, choices=sorted(LOSSES), default=None, help=f"default {v}")
        elif k == "sampler":
            t.add_argument(flag, choices=Sampler.KINDS, default=None, help=f"default {v}")
        elif k == "starts":
            t.add_argument(flag, choices=["train", "full"], default=None, help=f"default {v}")
        else:
            t.add_argument(flag, type=type(v), default=None, help=f"default {v}")
    t.add_argument("--config", help="JSON object of training options (unknown keys rejected)")
    t.add_argument("--init", help="checkpoint to start from instead of a fresh initialization")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="metrics log path (default: checkpoint path with .tsv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--instances", required=True, help="directory of instance files")
    e.add_argument("--augment8", type=_bool, nargs="?", const=True, default=False)
    e.add_argument("--starts", choices=["train", "full"], default="full")
    e.add_argument("--out", help="write the best trajectory per instance here")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", parents=[common], help="solve a corpus with a reference solver")
    o.add_argument("--instances", required=True)
    o.add_argument("--solver", choices=["exhaustive", "greedy"], default="exhaustive")
    o.add_argument("--out", help="write id, cost, expanded nodes and actions here")
    o.set_defaults(func=cmd_oracle)

    c = sub.add_parser("check", parents=[common], help="audit instance files")
    c.add_argument("--instances", required=True)
    c.set_defaults(func=cmd_check)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit of both losses")
    gc.add_argument("--d", type=int, default=8)
    gc.add_argument("--heads", type=int, default=2)
    gc.add_argument("--layers", type=int, default=2)
    gc.add_argument("--n", type=int, default=4)
    gc.add_argument("--m", type=int, default=2)
    gc.add_argument("--variant", default="MDVRP")
    gc.add_argument("--alpha", type=float, default=0.03)
    gc.add_argument("--coords", type=int, default=200, help="coordinates checked per loss")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def _apply_env(parser, environ):
    """Replace option defaults by MDROUTE_* environment values."""
    subs = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    for sp in subs[0].choices.values():
        for action in sp._actions:
            if not action.option_strings or action.dest == "help":
                continue
            key = ENV_PREFIX + action.dest.upper()
            if key not in environ:
                continue
            raw = environ[key]
            conv = action.type or str
            try:
                value = conv(raw)
            except (TypeError, ValueError):
                sp.error(f"environment variable {key}={raw!r} is not valid for {action.option_strings[0]}")
            if action.choices is not None and value not in action.choices:
                sp.error(f"environment variable {key}={raw!r} must be one of {list(action.choices)}")
            action.default = value
            action.required = False


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    _apply_env(parser, os.environ if environ is None else environ)
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    if args.seed is None and args.command != "train":
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        _summary(args.command, "error", reason=str(e).replace(" ", "_")[:80])
        return 2
