"""Multi-depot routing instances: variant flags, random generation and augmentation.

Node indexing is shared by every module: depots are ``0..m-1`` and customers
``m..m+n-1``.  Demands are kept as raw integers next to the capacity ``C`` so
that the normalized values ``raw / C`` are exact rationals; the vehicle can
carry one unit of normalized load.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

HORIZON = 4.6
SERVICE_TIME = 0.2
MAX_ROUTE_LIMIT = 3.0
BACKHAUL_FRACTION = 0.2

_NAME_RE = re.compile(r"^MD(O?)VRP(I?)(B?)(L?)((?:TW)?)$")


@dataclass(frozen=True)
class VariantFlags:
    open: bool = False
    backhaul: bool = False
    limit: bool = False
    time_window: bool = False
    inter_depot: bool = False
    backhaul_mode: str = "mixed"

    def __post_init__(self):
        if self.open and self.inter_depot:
            raise ValueError("open routes and inter-depot routes are mutually exclusive")
        if self.backhaul_mode not in ("mixed", "strict"):
            raise ValueError(f"unknown backhaul mode {self.backhaul_mode!r}")

    @property
    def z(self) -> np.ndarray:
        """Conditioning vector ordered (B, L, O, TW, I)."""
        return np.array(
            [self.backhaul, self.limit, self.open, self.time_window, self.inter_depot],
            dtype=float,
        )

    @property
    def n_constraints(self) -> int:
        return int(self.z.sum())

    @property
    def name(self) -> str:
        s = "MD" + ("O" if self.open else "") + "VRP"
        s += "I" if self.inter_depot else ""
        s += "B" if self.backhaul else ""
        s += "L" if self.limit else ""
        s += "TW" if self.time_window else ""
        return s

    @property
    def token(self) -> str:
        """Name plus backhaul mode when it differs from the default."""
        if self.backhaul and self.backhaul_mode == "strict":
            return self.name + ":strict"
        return self.name

    @classmethod
    def from_name(cls, name: str) -> "VariantFlags":
        base, _, mode = name.strip().partition(":")
        m = _NAME_RE.match(base.upper())
        if m is None:
            raise ValueError(f"unrecognised variant {name!r}")
        o, i, b, l, tw = m.groups()
        if o and i:
            raise ValueError(f"variant {name!r} combines open and inter-depot routes")
        return cls(
            open=bool(o),
            backhaul=bool(b),
            limit=bool(l),
            time_window=bool(tw),
            inter_depot=bool(i),
            backhaul_mode=mode.lower() or "mixed",
        )


VARIANT_NAMES = (
    "MDVRP", "MDOVRP", "MDVRPB", "MDVRPL", "MDVRPTW",
    "MDOVRPTW", "MDOVRPB", "MDOVRPL", "MDVRPBL", "MDVRPBTW", "MDVRPLTW",
    "MDOVRPBL", "MDOVRPBTW", "MDOVRPLTW", "MDVRPBLTW", "MDOVRPBLTW",
    "MDVRPI", "MDVRPIB", "MDVRPIL", "MDVRPITW",
    "MDVRPIBL", "MDVRPIBTW", "MDVRPILTW", "MDVRPIBLTW",
)
ALL_VARIANTS = tuple(VariantFlags.from_name(v) for v in VARIANT_NAMES)


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Instance:
    depot_coords: np.ndarray
    customer_coords: np.ndarray
    raw_demand: np.ndarray  # positive integers
    is_backhaul: np.ndarray
    capacity: int
    flags: VariantFlags = field(default_factory=VariantFlags)
    route_limit: float | None = None
    tw_early: np.ndarray | None = None
    tw_late: np.ndarray | None = None
    service_time: np.ndarray | None = None
    depot_close: float | None = None
    seed: int = 0

    def __post_init__(self):
        put = object.__setattr__
        put(self, "depot_coords", _frozen(self.depot_coords).reshape(-1, 2))
        put(self, "customer_coords", _frozen(self.customer_coords).reshape(-1, 2))
        put(self, "raw_demand", _frozen(self.raw_demand, np.int64))
        put(self, "is_backhaul", _frozen(self.is_backhaul, bool))
        for name in ("tw_early", "tw_late", "service_time"):
            v = getattr(self, name)
            if v is not None:
                put(self, name, _frozen(v))
        n = len(self.customer_coords)
        if self.raw_demand.shape != (n,) or self.is_backhaul.shape != (n,):
            raise ValueError("demand arrays must have one entry per customer")
        if self.is_backhaul.any() and not self.flags.backhaul:
            raise ValueError("backhaul customers present but backhaul flag is off")
        if self.flags.limit != (self.route_limit is not None):
            raise ValueError("route_limit must be present iff the limit flag is set")
        tw = (self.tw_early, self.tw_late, self.service_time, self.depot_close)
        if self.flags.time_window and any(v is None for v in tw):
            raise ValueError("time-window data missing")
        if not self.flags.time_window and any(v is not None for v in tw):
            raise ValueError("time-window data present but time_window flag is off")

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return _fields_equal(self, other)

    __hash__ = None

    @property
    def n(self) -> int:
        return len(self.customer_coords)

    @property
    def m(self) -> int:
        return len(self.depot_coords)

    @property
    def n_nodes(self) -> int:
        return self.m + self.n

    @cached_property
    def coords(self) -> np.ndarray:
        """All node coordinates, depots first."""
        return np.concatenate([self.depot_coords, self.customer_coords])

    @cached_property
    def dist(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff**2).sum(-1))

    @cached_property
    def signed_raw_demand(self) -> np.ndarray:
        return np.where(self.is_backhaul, -self.raw_demand, self.raw_demand)

    @cached_property
    def demand(self) -> np.ndarray:
        """Normalized signed demand (negative for backhaul pickups)."""
        return self.signed_raw_demand / self.capacity

    def customer_features(self) -> np.ndarray:
        """(n, 6) features: x, y, demand, early, late, service (TW fields 0 when inactive)."""
        feats = np.zeros((self.n, 6))
        feats[:, :2] = self.customer_coords
        feats[:, 2] = self.demand
        if self.flags.time_window:
            feats[:, 3] = self.tw_early
            feats[:, 4] = self.tw_late
            feats[:, 5] = self.service_time
        return feats


_ARRAY_FIELDS = ("depot_coords", "customer_coords", "raw_demand", "is_backhaul",
                 "tw_early", "tw_late", "service_time")
_SCALAR_FIELDS = ("capacity", "flags", "route_limit", "depot_close", "seed")


def _fields_equal(a: Instance, b: Instance) -> bool:
    for f in _SCALAR_FIELDS:
        if getattr(a, f) != getattr(b, f):
            return False
    for f in _ARRAY_FIELDS:
        x, y = getattr(a, f), getattr(b, f)
        if (x is None) != (y is None):
            return False
        if x is not None and (x.shape != y.shape or not np.array_equal(x, y)):
            return False
    return True


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream keyed directly by the 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def capacity_for(n: int) -> int:
    if n == 50:
        return 40
    if n == 100:
        return 50
    c = round(40 + (n - 50) * 10 / 50)
    return int(min(50, max(40, c)))


def backhaul_count(n: int) -> int:
    """ceil(n / 5) in integer arithmetic."""
    return -(-n // 5)


def audit_instance(inst: Instance) -> list[tuple[str, str]]:
    """Generator invariants that ``inst`` violates, as (name, detail) pairs."""
    bad = []
    coords = inst.coords
    if not np.all((coords >= 0.0) & (coords <= 1.0)):
        i = int(np.argwhere((coords < 0.0) | (coords > 1.0))[0, 0])
        bad.append(("coordinates-in-unit-square", f"node {i} at {tuple(coords[i])}"))
    if inst.capacity < 1:
        bad.append(("capacity-positive", f"capacity {inst.capacity}"))
    if inst.n and not np.all((inst.raw_demand >= 1) & (inst.raw_demand <= 9)):
        bad.append(("demand-range", f"raw demands must lie in 1..9, got {inst.raw_demand.tolist()}"))
    if inst.flags.backhaul and int(inst.is_backhaul.sum()) != backhaul_count(inst.n):
        bad.append(("backhaul-count", f"{int(inst.is_backhaul.sum())} backhaul customers, "
                                      f"expected {backhaul_count(inst.n)}"))
    d_star = float(inst.dist[:inst.m, inst.m:].max()) if inst.n else 0.0
    if inst.flags.limit and not inst.route_limit >= 2.0 * d_star:
        bad.append(("route-limit-bound", f"route_limit {inst.route_limit} < 2*{d_star}"))
    if inst.flags.time_window:
        if not np.all(inst.tw_early <= inst.tw_late):
            bad.append(("time-window-order", "some early bound exceeds its late bound"))
        if not np.all(inst.service_time >= 0):
            bad.append(("service-time-nonnegative", "negative service time"))
        far = inst.dist[:inst.m, inst.m:].max(axis=0)
        start = np.maximum(far, inst.tw_early)
        ok = (start <= inst.tw_late + 1e-9) & (start + inst.service_time + far <= inst.depot_close + 1e-9)
        if not np.all(ok):
            bad.append(("time-window-reachable", f"customer {int(np.argmin(ok))} unreachable from some depot"))
    return bad


def sample_route_limit(depot_coords, customer_coords, rng) -> float:
    depot_coords = np.asarray(depot_coords, dtype=float).reshape(-1, 2)
    customer_coords = np.asarray(customer_coords, dtype=float).reshape(-1, 2)
    diff = depot_coords[:, None, :] - customer_coords[None, :, :]
    d_star = float(np.sqrt((diff**2).sum(-1)).max())
    lo = 2.0 * d_star
    u = rng.random()
    if lo >= MAX_ROUTE_LIMIT:
        return lo
    return lo + (MAX_ROUTE_LIMIT - lo) * u


def sample_time_windows(depot_coords, customer_coords, rng):
    """Windows that every depot can reach and return from within the horizon.

    The window center for customer i is drawn between its farthest-depot
    distance and ``HORIZON - SERVICE_TIME - that distance``.
    """
    diff = customer_coords[:, None, :] - depot_coords[None, :, :]
    far = np.sqrt((diff**2).sum(-1)).max(axis=1)
    n = len(customer_coords)
    u_center = rng.random(n)
    u_width = rng.random(n)
    last_start = HORIZON - SERVICE_TIME
    center = far + (last_start - 2 * far) * u_center
    width = 0.15 + (0.9 - 0.15) * u_width
    early = np.maximum(0.0, center - width)
    late = np.minimum(last_start, center + width)
    service = np.full(n, SERVICE_TIME)
    return early, late, service


def generate_instance(n: int, m: int, flags: VariantFlags | None = None, seed: int = 0) -> Instance:
    """Sample an instance; every random component is drawn whatever the flags,
    so variants generated from the same seed share coordinates and demands."""
    if n < 1 or m < 1:
        raise ValueError("need at least one customer and one depot")
    flags = flags or VariantFlags()
    rng = make_rng(seed)
    depots = rng.random((m, 2))
    customers = rng.random((n, 2))
    raw = rng.integers(1, 10, size=n)
    n_back = backhaul_count(n)
    back_idx = rng.permutation(n)[:n_back]
    limit = sample_route_limit(depots, customers, rng)
    early, late, service = sample_time_windows(depots, customers, rng)

    is_backhaul = np.zeros(n, dtype=bool)
    if flags.backhaul:
        is_backhaul[back_idx] = True
    kw = {}
    if flags.time_window:
        kw = dict(tw_early=early, tw_late=late, service_time=service, depot_close=HORIZON)
    return Instance(
        depot_coords=depots,
        customer_coords=customers,
        raw_demand=raw,
        is_backhaul=is_backhaul,
        capacity=capacity_for(n),
        flags=flags,
        route_limit=limit if flags.limit else None,
        seed=int(seed),
        **kw,
    )


# (x, y) -> k-th image; see augment()
_DIHEDRAL = (
    lambda x, y: (x, y),
    lambda x, y: (y, x),
    lambda x, y: (x, 1 - y),
    lambda x, y: (y, 1 - x),
    lambda x, y: (1 - x, y),
    lambda x, y: (1 - y, x),
    lambda x, y: (1 - x, 1 - y),
    lambda x, y: (1 - y, 1 - x),
)
DIHEDRAL_INVERSE = (0, 1, 2, 5, 4, 3, 6, 7)


def _map_coords(pts: np.ndarray, k: int) -> np.ndarray:
    x, y = _DIHEDRAL[k](pts[:, 0], pts[:, 1])
    return np.stack([x, y], axis=1)


def augment(instance: Instance, k: int) -> Instance:
    """Apply the k-th symmetry of the unit square to all coordinates."""
    if not 0 <= k < 8:
        raise ValueError(f"augmentation index {k} outside 0..7")
    if k == 0:
        return instance
    return _replace(
        instance,
        depot_coords=_map_coords(instance.depot_coords, k),
        customer_coords=_map_coords(instance.customer_coords, k),
    )


def _replace(instance: Instance, **changes) -> Instance:
    kw = {f: getattr(instance, f) for f in _ARRAY_FIELDS + _SCALAR_FIELDS}
    kw.update(changes)
    return Instance(**kw)


def with_flags(instance: Instance, flags: VariantFlags, **changes) -> Instance:
    """Copy of ``instance`` under different flags, dropping data the flags exclude.

    Missing data required by the new flags must be supplied through ``changes``.
    """
    kw = dict(flags=flags)
    if not flags.backhaul:
        kw["is_backhaul"] = np.zeros(instance.n, dtype=bool)
    if not flags.limit:
        kw["route_limit"] = None
    if not flags.time_window:
        kw.update(tw_early=None, tw_late=None, service_time=None, depot_close=None)
    kw.update(changes)
    return _replace(instance, **kw)
