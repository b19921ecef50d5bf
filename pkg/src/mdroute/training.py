"""Losses, task scheduling and the training loop.

Both losses take the (B, N) Var of summed trajectory log-probabilities
produced by :func:`mdroute.rollout.rollout_batch` together with a plain
(B, N) reward array; rewards never enter the tape.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .fileio import format_checkpoint
from .instances import ALL_VARIANTS, VariantFlags, generate_instance, make_rng
from .policy import PolicyConfig, init_params
from .rollout import rollout_batch

# -- losses ----------------------------------------------------------------


def shared_baseline(rewards) -> float:
    """Mean reward over the N trajectories of one instance."""
    r = [float(x) for x in rewards]
    if not r:
        raise ValueError("baseline of an empty reward list")
    return math.fsum(r) / len(r)


def advantages(rewards) -> np.ndarray:
    """Per-instance centered rewards for a (B, N) reward array."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 2 or r.shape[1] < 1:
        raise ValueError("rewards must have shape (B, N) with N >= 1")
    return r - np.array([shared_baseline(row) for row in r])[:, None]


def _check_shapes(logp: Var, rewards):
    r = np.asarray(rewards, dtype=float)
    if logp.shape != r.shape:
        raise ValueError(f"log-probabilities {logp.shape} and rewards {r.shape} do not match")
    return r


def reinforce_loss(logp: Var, rewards) -> Var:
    """-(1/BN) sum (R - b) log pi, advantages held constant."""
    r = _check_shapes(logp, rewards)
    return -ad.mean(logp * advantages(r))


def preference_labels(rewards) -> np.ndarray:
    """y[i, j, k] = 1 where trajectory j beat k on instance i.

    Accepts a length-N vector or a (B, N) array.  Ties and self pairs get 0,
    so they carry no label.
    """
    r = np.asarray(rewards, dtype=float)
    single = r.ndim == 1
    r = np.atleast_2d(r)
    if r.shape[1] < 2:
        raise ValueError("preference labels need at least two trajectories")
    y = (r[:, :, None] > r[:, None, :]).astype(float)
    return y[0] if single else y


def po_loss(logp: Var, rewards, alpha: float = 0.03) -> Var:
    """Bradley-Terry loss over all labeled ordered pairs, normalized by B*N^2."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    r = _check_shapes(logp, rewards)
    B, N = r.shape
    y = preference_labels(r)
    diff = ad.reshape(logp, (B, N, 1)) - ad.reshape(logp, (B, 1, N))
    ll = ad.log_sigmoid(ad.scale(diff, alpha))
    return ad.scale(ad.sum(ll * y), -1.0 / (B * N * N))


LOSSES = {"reinforce": lambda lp, r, alpha: reinforce_loss(lp, r),
          "po": lambda lp, r, alpha: po_loss(lp, r, alpha)}


# -- curriculum and samplers -----------------------------------------------

PHASE1_NAMES = ("MDVRP", "MDOVRP", "MDVRPB", "MDVRPL", "MDVRPTW", "MDVRPI",
                "MDOVRPTW", "MDVRPBTW", "MDVRPITW")
UNIFIED_NAMES = ("MDVRP", "MDOVRP", "MDVRPB", "MDVRPL", "MDVRPTW", "MDVRPI")


def _pool(names) -> tuple[VariantFlags, ...]:
    keep = set(names)
    return tuple(v for v in ALL_VARIANTS if v.name in keep)


@dataclass(frozen=True)
class CurriculumSchedule:
    """Four nested variant pools switched at 30%, 60% and 90% of training."""

    total_epochs: int
    pools: tuple = ()

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")
        if not self.pools:
            object.__setattr__(self, "pools", staged_pools(PHASE1_NAMES))
        for a, b in zip(self.pools, self.pools[1:]):
            if not set(a) <= set(b):
                raise ValueError("curriculum pools must be nested")

    def phase(self, epoch: int) -> int:
        if not 0 <= epoch < self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.total_epochs})")
        T = self.total_epochs
        # integer comparisons avoid 0.3*T rounding surprises
        for k, num in enumerate((3, 6, 9), start=1):
            if 10 * epoch < num * T:
                return k
        return 4


def staged_pools(first) -> tuple:
    """Phase pools: ``first``, then every variant with at most 2, 3, 4 constraints."""
    p1 = _pool(first)
    grow = [tuple(v for v in ALL_VARIANTS if v in p1 or v.n_constraints <= k) for k in (2, 3)]
    return (p1, grow[0], grow[1], ALL_VARIANTS)


def curriculum_variants(epoch: int, schedule: CurriculumSchedule) -> tuple[VariantFlags, ...]:
    return schedule.pools[schedule.phase(epoch) - 1]


class Sampler:
    """Variant pool per epoch.  Kinds:

    curriculum  four staged pools starting from the mixed phase-1 list
    standard    staged by constraint count only (0/1, then 2, 3, 4)
    uniform     all 24 variants every epoch
    unified     MDVRP and the five single-constraint variants every epoch
    fixed       an explicit list of variant names
    """

    KINDS = ("curriculum", "standard", "uniform", "unified", "fixed")

    def __init__(self, kind: str, total_epochs: int, variants=None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown sampler {kind!r}; choose from {', '.join(self.KINDS)}")
        self.kind = kind
        self.schedule = None
        if kind == "curriculum":
            self.schedule = CurriculumSchedule(total_epochs)
        elif kind == "standard":
            self.schedule = CurriculumSchedule(total_epochs, staged_pools(UNIFIED_NAMES))
        elif kind == "uniform":
            self.fixed = ALL_VARIANTS
        elif kind == "unified":
            self.fixed = _pool(UNIFIED_NAMES)
        else:
            if not variants:
                raise ValueError("the fixed sampler needs a variant list")
            self.fixed = tuple(VariantFlags.from_name(v) if isinstance(v, str) else v for v in variants)

    def phase(self, epoch: int) -> int:
        return self.schedule.phase(epoch) if self.schedule else 1

    def pool(self, epoch: int) -> tuple[VariantFlags, ...]:
        if self.schedule:
            return curriculum_variants(epoch, self.schedule)
        return self.fixed


def sample_batch(pool, batch_size: int, n: int, m: int, rng, mixed: bool = False):
    """One variant drawn uniformly from ``pool`` and ``batch_size`` fresh instances of it.

    With ``mixed`` every instance draws its own variant; the returned flags
    are then None.
    """
    pool = tuple(pool)
    if not pool:
        raise ValueError("empty variant pool")
    seeds = rng.integers(0, 2**63, size=batch_size)
    if mixed:
        picks = rng.integers(0, len(pool), size=batch_size)
        return None, [generate_instance(n, m, pool[k], int(s)) for k, s in zip(picks, seeds)]
    flags = pool[int(rng.integers(0, len(pool)))]
    return flags, [generate_instance(n, m, flags, int(s)) for s in seeds]


# -- gradient statistics ---------------------------------------------------

@dataclass
class GradientStats:
    variance: np.ndarray
    magnitude: float
    snr: float

    @property
    def mean_variance(self) -> float:
        return float(self.variance.mean())


def flatten_grads(grads: dict) -> np.ndarray:
    return np.concatenate([np.ravel(grads[k]) for k in sorted(grads)])


def gradient_stats(batches) -> GradientStats:
    """Spread of per-batch gradients (arrays or name->array dicts)."""
    G = np.stack([flatten_grads(g) if isinstance(g, dict) else np.ravel(g) for g in batches])
    if G.shape[0] < 2:
        raise ValueError("gradient statistics need at least two batches")
    var = G.var(axis=0)
    var[np.ptp(G, axis=0) == 0] = 0.0  # the mean can round off a constant column
    std = np.sqrt(var)
    mu = np.abs(G.mean(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(std > 0, mu / np.where(std > 0, std, 1.0), np.where(mu > 0, np.inf, 0.0))
    return GradientStats(var, float(np.linalg.norm(G, axis=1).mean()), float(ratio.mean()))


# -- optimizer -------------------------------------------------------------

class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-6):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in params:
            g = grads[k] + self.wd * params[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class MultiStepLR:
    def __init__(self, optimizer: Adam, milestones=(270, 295), gamma=0.1):
        self.opt = optimizer
        self.base = optimizer.lr
        self.milestones = tuple(sorted(milestones))
        self.gamma = gamma

    def set_epoch(self, epoch: int) -> None:
        passed = sum(1 for s in self.milestones if epoch >= s)
        self.opt.lr = self.base * self.gamma ** passed


# -- training loop ---------------------------------------------------------

class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    n: int = 8
    m: int = 2
    epochs: int = 30
    instances_per_epoch: int = 2000
    batch_size: int = 64
    loss: str = "po"
    alpha: float = 0.03
    lr: float = 1e-4
    weight_decay: float = 1e-6
    multistep: bool = False
    milestones: tuple = (270, 295)
    gamma: float = 0.1
    sampler: str = "curriculum"
    variants: tuple = ()
    mixed: bool = False
    starts: str = "train"
    seed: int = 0
    d: int = 16
    heads: int = 2
    layers: int = 2
    ff_hidden: int = 64
    clip: float = 10.0
    film_identity: bool = False
    checkpoint: str | None = None
    metrics: str | None = None
    checkpoint_every: int = 0
    init_params: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss == "po" and not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.epochs < 0 or self.instances_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, instances_per_epoch and batch_size must be valid counts")
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be positive")
        self.variants = tuple(self.variants)
        self.milestones = tuple(self.milestones)
        self.policy  # validates head/dimension compatibility

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @property
    def policy(self) -> PolicyConfig:
        return PolicyConfig(d=self.d, heads=self.heads, layers=self.layers,
                            ff_hidden=self.ff_hidden, clip=self.clip)

    def header(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name in ("init_params", "checkpoint", "metrics"):
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


METRIC_COLUMNS = ("epoch", "phase", "pool_size", "loss", "mean_cost", "grad_norm")


@dataclass
class TrainResult:
    params: dict
    metrics: list = field(default_factory=list)
    config: TrainConfig | None = None


def _write_checkpoint(path, params, config):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="\n") as fh:
        fh.write(format_checkpoint(params, config.header()))
    os.replace(tmp, path)


def train_step(params: dict, instances, cfg: PolicyConfig, loss: str, alpha: float, rng, starts="train"):
    """Sampled rollouts, loss and gradient for one batch of same-size instances."""
    tape = Tape()
    P = tape.watch(params)
    trajs, logp = rollout_batch(instances, P, cfg, "sample", rng, starts=starts)
    rewards = np.array([[-t.cost for t in row] for row in trajs])
    out = LOSSES[loss](logp, rewards, alpha)
    grads = ad.backward(tape, out)
    return float(out.value), grads, rewards


def train(config, log=None) -> TrainResult:
    """Run the epoch loop; returns final parameters and per-epoch metrics.

    ``config`` is a TrainConfig or a plain dict (unknown keys are rejected).
    """
    if isinstance(config, dict):
        config = TrainConfig.from_dict(config)
    cfg = config.policy
    params = (dict(config.init_params) if config.init_params is not None
              else init_params(cfg, config.seed, config.film_identity))
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    sampler = Sampler(config.sampler, max(config.epochs, 1), config.variants)
    opt = Adam(params, config.lr, weight_decay=config.weight_decay)
    sched = MultiStepLR(opt, config.milestones, config.gamma) if config.multistep else None
    data_rng = make_rng(config.seed)
    act_rng = make_rng(config.seed ^ 0x5DEECE66D)
    metrics = []
    mfh = None
    if config.metrics:
        mfh = open(config.metrics, "w", newline="\n")
        mfh.write("\t".join(METRIC_COLUMNS) + "\n")
    try:
        for epoch in range(config.epochs):
            if sched:
                sched.set_epoch(epoch)
            pool = sampler.pool(epoch)
            losses, costs, norms = [], [], []
            left = config.instances_per_epoch
            batch_no = 0
            while left > 0:
                bs = min(config.batch_size, left)
                left -= bs
                _, instances = sample_batch(pool, bs, config.n, config.m, data_rng, config.mixed)
                try:
                    value, grads, rewards = train_step(params, instances, cfg, config.loss, config.alpha,
                                                       act_rng, config.starts)
                    gnorm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
                except FloatingPointError:
                    value = gnorm = math.nan
                if not (math.isfinite(value) and math.isfinite(gnorm)):
                    dump = None
                    if config.checkpoint:
                        dump = f"{config.checkpoint}.diverged"
                        _write_checkpoint(dump, params, config)
                    raise TrainingDiverged(
                        f"non-finite loss {value} (grad norm {gnorm}) at epoch {epoch}, batch {batch_no}"
                        + (f"; parameters dumped to {dump}" if dump else ""))
                opt.step(params, grads)
                losses.append(value * bs)
                costs.append(float(-rewards.sum()))
                norms.append(gnorm)
                batch_no += 1
            n_traj = config.instances_per_epoch * rewards.shape[1]
            row = (epoch, sampler.phase(epoch), len(pool),
                   math.fsum(losses) / config.instances_per_epoch, math.fsum(costs) / n_traj,
                   math.fsum(norms) / len(norms))
            metrics.append(row)
            if mfh:
                mfh.write("\t".join(str(x) if isinstance(x, int) else repr(x) for x in row) + "\n")
                mfh.flush()
            if log:
                log(f"epoch {epoch} phase {row[1]} pool {row[2]} loss {row[3]:.6g} "
                    f"cost {row[4]:.4f} grad {row[5]:.4g}")
            if config.checkpoint and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                _write_checkpoint(config.checkpoint, params, config)
    finally:
        if mfh:
            mfh.close()
    if config.checkpoint:
        _write_checkpoint(config.checkpoint, params, config)
    return TrainResult(params, metrics, config)
