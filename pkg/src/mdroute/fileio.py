"""Text formats: instances, checkpoints and trajectory dumps.

Instance files are line oriented.  A section starts with its name alone on a
line (``HEADER``, ``FLAGS``, ``DEPOTS``, ``CUSTOMERS``) and the file ends with
``END``::

    HEADER
    format mdroute-instance 1
    n 2
    m 1
    capacity 40
    seed 7
    route_limit 2.5          (only with the L flag)
    depot_close 4.6          (only with the TW flag)
    FLAGS
    open 0
    backhaul 1
    backhaul_mode mixed
    limit 1
    time_window 0
    inter_depot 0
    DEPOTS
    0.5 0.25                 (x y, one line per depot)
    CUSTOMERS
    0.1 0.9 3 0              (x y raw_demand is_backhaul [early late service])
    0.7 0.2 9 1
    END

Floats are written with ``repr`` (shortest round-trip form), so reading a
written file reproduces every value bit for bit.
"""

from __future__ import annotations

import io
import os

import numpy as np

from .instances import Instance, VariantFlags

INSTANCE_MAGIC = "mdroute-instance 1"
CHECKPOINT_MAGIC = "mdroute-checkpoint 1"


class ParseError(ValueError):
    def __init__(self, message, line=None, field=None):
        loc = f"line {line}: " if line is not None else ""
        fld = f"[{field}] " if field is not None else ""
        super().__init__(f"{loc}{fld}{message}")
        self.line = line
        self.field = field


def _f(x) -> str:
    return repr(float(x))


def format_instance(inst: Instance) -> str:
    f = inst.flags
    out = ["HEADER", f"format {INSTANCE_MAGIC}", f"n {inst.n}", f"m {inst.m}",
           f"capacity {inst.capacity}", f"seed {inst.seed}"]
    if f.limit:
        out.append(f"route_limit {_f(inst.route_limit)}")
    if f.time_window:
        out.append(f"depot_close {_f(inst.depot_close)}")
    out += ["FLAGS", f"open {int(f.open)}", f"backhaul {int(f.backhaul)}",
            f"backhaul_mode {f.backhaul_mode}", f"limit {int(f.limit)}",
            f"time_window {int(f.time_window)}", f"inter_depot {int(f.inter_depot)}", "DEPOTS"]
    out += [f"{_f(x)} {_f(y)}" for x, y in inst.depot_coords]
    out.append("CUSTOMERS")
    for c in range(inst.n):
        x, y = inst.customer_coords[c]
        row = [_f(x), _f(y), str(int(inst.raw_demand[c])), str(int(inst.is_backhaul[c]))]
        if f.time_window:
            row += [_f(inst.tw_early[c]), _f(inst.tw_late[c]), _f(inst.service_time[c])]
        out.append(" ".join(row))
    out.append("END")
    return "\n".join(out) + "\n"


def write_instance(inst: Instance, sink) -> None:
    text = format_instance(inst)
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w", newline="\n") as fh:
            fh.write(text)
    else:
        sink.write(text)


def _num(value, line, field, kind=float):
    try:
        return kind(value)
    except ValueError:
        raise ParseError(f"cannot parse {value!r} as {kind.__name__}", line, field) from None


def _flag(value, line, field):
    if value not in ("0", "1"):
        raise ParseError(f"expected 0 or 1, got {value!r}", line, field)
    return value == "1"


def parse_instance(text: str) -> Instance:
    lines = text.splitlines()
    sections = {"HEADER": {}, "FLAGS": {}, "DEPOTS": [], "CUSTOMERS": []}
    current = None
    ended = False
    for no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if ended:
            raise ParseError("content after END", no)
        if line in sections:
            current = line
            continue
        if line == "END":
            ended = True
            continue
        if current is None:
            raise ParseError("data before the first section", no)
        if current in ("HEADER", "FLAGS"):
            key, _, value = line.partition(" ")
            if not value:
                raise ParseError("missing value", no, key)
            sections[current][key] = (value.strip(), no)
        else:
            sections[current].append((line.split(), no))
    if not ended:
        raise ParseError("missing END marker", len(lines))

    head, flg = sections["HEADER"], sections["FLAGS"]

    def need(table, key, section):
        if key not in table:
            raise ParseError(f"missing field in {section}", None, key)
        return table[key]

    fmt, no = need(head, "format", "HEADER")
    if fmt != INSTANCE_MAGIC:
        raise ParseError(f"unsupported format {fmt!r}", no, "format")
    n = _num(*need(head, "n", "HEADER"), "n", int)
    m = _num(*need(head, "m", "HEADER"), "m", int)
    capacity = _num(*need(head, "capacity", "HEADER"), "capacity", int)
    seed = _num(*need(head, "seed", "HEADER"), "seed", int)
    bools = {k: _flag(*need(flg, k, "FLAGS"), k)
             for k in ("open", "backhaul", "limit", "time_window", "inter_depot")}
    mode, no = need(flg, "backhaul_mode", "FLAGS")
    try:
        flags = VariantFlags(backhaul_mode=mode, **bools)
    except ValueError as e:
        raise ParseError(str(e), no, "FLAGS") from None
    route_limit = _num(*need(head, "route_limit", "HEADER"), "route_limit") if flags.limit else None
    depot_close = _num(*need(head, "depot_close", "HEADER"), "depot_close") if flags.time_window else None

    depots = []
    for cols, no in sections["DEPOTS"]:
        if len(cols) != 2:
            raise ParseError("depot rows need x y", no, "DEPOTS")
        depots.append([_num(c, no, "DEPOTS") for c in cols])
    width = 7 if flags.time_window else 4
    cust, dem, back, tw = [], [], [], []
    for cols, no in sections["CUSTOMERS"]:
        if len(cols) != width:
            raise ParseError(f"customer rows need {width} columns", no, "CUSTOMERS")
        cust.append([_num(cols[0], no, "x"), _num(cols[1], no, "y")])
        dem.append(_num(cols[2], no, "demand", int))
        back.append(_flag(cols[3], no, "backhaul"))
        if flags.time_window:
            tw.append([_num(c, no, k) for c, k in zip(cols[4:], ("early", "late", "service"))])
    if len(depots) != m:
        raise ParseError(f"expected {m} depots, found {len(depots)}", None, "DEPOTS")
    if len(cust) != n:
        raise ParseError(f"expected {n} customers, found {len(cust)}", None, "CUSTOMERS")
    kw = {}
    if flags.time_window:
        tw = np.array(tw)
        kw = dict(tw_early=tw[:, 0], tw_late=tw[:, 1], service_time=tw[:, 2], depot_close=depot_close)
    try:
        return Instance(depot_coords=np.array(depots), customer_coords=np.array(cust),
                        raw_demand=np.array(dem, dtype=np.int64), is_backhaul=np.array(back, dtype=bool),
                        capacity=capacity, flags=flags, route_limit=route_limit, seed=seed, **kw)
    except ValueError as e:
        raise ParseError(str(e)) from None


def read_instance(source) -> Instance:
    if isinstance(source, (str, os.PathLike)):
        with open(source) as fh:
            return parse_instance(fh.read())
    return parse_instance(source.read())


# -- checkpoints -----------------------------------------------------------

def format_checkpoint(params: dict, hyper: dict) -> str:
    out = [f"# {CHECKPOINT_MAGIC}"]
    for k, v in hyper.items():
        out.append(f"hyper {k} {v!r}")
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=float)
        out.append(f"tensor {name} " + " ".join(str(s) for s in arr.shape))
        flat = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
        for row in flat:
            out.append(" ".join(_f(x) for x in row))
    out.append("end")
    return "\n".join(out) + "\n"


def write_checkpoint(path, params: dict, hyper: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_checkpoint(params, hyper))


def parse_checkpoint(text: str):
    import ast

    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {CHECKPOINT_MAGIC}":
        raise ParseError("not a checkpoint file", 1, "magic")
    hyper, params = {}, {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        if line == "end":
            return params, hyper
        kind, _, rest = line.partition(" ")
        if kind == "hyper":
            key, _, value = rest.partition(" ")
            try:
                hyper[key] = ast.literal_eval(value)
            except (ValueError, SyntaxError):
                raise ParseError(f"bad hyperparameter value {value!r}", i + 1, key) from None
            i += 1
        elif kind == "tensor":
            name, *shape = rest.split()
            shape = tuple(int(s) for s in shape)
            n_rows = shape[0] if len(shape) > 1 else 1
            rows = lines[i + 1:i + 1 + n_rows]
            try:
                values = [float(x) for r in rows for x in r.split()]
            except ValueError:
                raise ParseError("bad tensor value", i + 1, name) from None
            if len(values) != int(np.prod(shape)):
                raise ParseError("tensor size does not match its shape", i + 1, name)
            params[name] = np.array(values).reshape(shape)
            i += 1 + n_rows
        else:
            raise ParseError(f"unexpected line {line!r}", i + 1)
    raise ParseError("missing end marker", len(lines))


def read_checkpoint(path):
    with open(path) as fh:
        return parse_checkpoint(fh.read())


# -- trajectory dumps ------------------------------------------------------

def format_trajectories(rows) -> str:
    """One line per solution: ``<id> <cost> <a0> <a1> ...``."""
    buf = io.StringIO()
    for ident, cost, actions in rows:
        buf.write(f"{ident} {_f(cost)} " + " ".join(str(int(a)) for a in actions) + "\n")
    return buf.getvalue()


def parse_trajectories(text: str):
    rows = []
    for no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 3:
            raise ParseError("trajectory rows need id, cost and actions", no)
        try:
            rows.append((parts[0], float(parts[1]), [int(a) for a in parts[2:]]))
        except ValueError:
            raise ParseError(f"bad number in {line.strip()!r}", no) from None
    return rows


def format_oracle_results(rows) -> str:
    """One line per instance: ``<id> <cost> <nodes_expanded> <a0> <a1> ...``."""
    buf = io.StringIO()
    for ident, cost, expanded, actions in rows:
        buf.write(f"{ident} {_f(cost)} {int(expanded)} " + " ".join(str(int(a)) for a in actions) + "\n")
    return buf.getvalue()
