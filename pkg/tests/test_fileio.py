import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdroute.fileio import (ParseError, format_checkpoint, format_instance, format_oracle_results,
                            format_trajectories, parse_checkpoint, parse_instance, parse_trajectories,
                            read_checkpoint, read_instance, write_checkpoint, write_instance)
from mdroute.instances import ALL_VARIANTS, VariantFlags, audit_instance, generate_instance
from mdroute.policy import PolicyConfig, init_params


def test_round_trip_file(tmp_path):
    inst = generate_instance(7, 3, VariantFlags.from_name("MDVRPBLTW:strict"), seed=12)
    path = tmp_path / "i.txt"
    write_instance(inst, path)
    assert read_instance(path) == inst
    buf = io.StringIO()
    write_instance(inst, buf)
    assert read_instance(io.StringIO(buf.getvalue())) == inst


@settings(max_examples=100)
@given(st.sampled_from(ALL_VARIANTS), st.integers(0, 2**64 - 1), st.integers(1, 20), st.integers(1, 4))
def test_second_write_is_byte_identical(flags, seed, n, m):
    inst = generate_instance(n, m, flags, seed)
    text = format_instance(inst)
    back = parse_instance(text)
    assert back == inst
    assert format_instance(back) == text


def test_hundred_instances_across_variants():
    for i in range(100):
        inst = generate_instance(1 + i % 9, 1 + i % 3, ALL_VARIANTS[i % 24], seed=i)
        text = format_instance(inst)
        assert format_instance(parse_instance(text)) == text


def _text():
    return format_instance(generate_instance(3, 2, VariantFlags.from_name("MDVRPTW"), seed=1))


def test_missing_capacity_named():
    text = "\n".join(l for l in _text().splitlines() if not l.startswith("capacity"))
    with pytest.raises(ParseError) as err:
        parse_instance(text)
    assert err.value.field == "capacity" and "capacity" in str(err.value)


def test_bad_number_reports_line_and_field():
    lines = _text().splitlines()
    i = lines.index("CUSTOMERS") + 2
    cols = lines[i].split()
    cols[1] = "abc"
    lines[i] = " ".join(cols)
    with pytest.raises(ParseError) as err:
        parse_instance("\n".join(lines))
    assert err.value.line == i + 1 and err.value.field == "y"


@pytest.mark.parametrize("mutate,field", [
    (lambda t: t.replace("time_window 1", "time_window yes"), "time_window"),
    (lambda t: t.replace("mdroute-instance 1", "mdroute-instance 9"), "format"),
    (lambda t: t.replace("\nEND\n", "\n"), None),
    (lambda t: t.replace("m 2", "m 3"), "DEPOTS"),
    (lambda t: t.replace("inter_depot 0", "inter_depot 1").replace("open 0", "open 1"), "FLAGS"),
])
def test_malformed(mutate, field):
    with pytest.raises(ParseError) as err:
        parse_instance(mutate(_text()))
    assert err.value.field == field


def test_out_of_range_values_parse_but_fail_audit():
    # the parser checks syntax; value ranges are the auditor's job
    lines = _text().splitlines()
    i = lines.index("DEPOTS") + 1
    lines[i] = "1.5 0.2"
    problems = audit_instance(parse_instance("\n".join(lines)))
    assert [name for name, _ in problems] == ["coordinates-in-unit-square"]


def test_checkpoint_round_trip(tmp_path):
    params = init_params(PolicyConfig(d=8, layers=1, ff_hidden=16), 0)
    params["scalar"] = np.array(2.5)
    hyper = {"d": 8, "lr": 1e-4, "variants": ["MDVRP"], "checkpoint": None, "multistep": False}
    path = tmp_path / "c.txt"
    write_checkpoint(path, params, hyper)
    back, h = read_checkpoint(path)
    assert h == hyper and list(back) == list(params)
    assert all(np.array_equal(back[k], params[k]) and back[k].shape == params[k].shape for k in params)
    assert format_checkpoint(back, h) == path.read_text()


def test_checkpoint_errors():
    good = format_checkpoint({"w": np.ones((2, 2))}, {"d": 8})
    with pytest.raises(ParseError):
        parse_checkpoint("hello\n")
    with pytest.raises(ParseError, match="size"):
        parse_checkpoint(good.replace("tensor w 2 2", "tensor w 2 3"))
    with pytest.raises(ParseError):
        parse_checkpoint(good.replace("end\n", ""))
    with pytest.raises(ParseError) as err:
        parse_checkpoint(good.replace("hyper d 8", "hyper d eight"))
    assert err.value.field == "d"


def test_trajectory_dump():
    rows = [("a", 1.25, [0, 2, 3, 0]), ("b", 0.1 + 0.2, [1, 2, 1])]
    back = parse_trajectories(format_trajectories(rows))
    assert back == rows
    with pytest.raises(ParseError):
        parse_trajectories("x 1.0\n")
    with pytest.raises(ParseError):
        parse_trajectories("x 1.0 0 q 0\n")


def test_oracle_dump():
    text = format_oracle_results([("i0", 2.0, 17, [0, 2, 0])])
    assert text == "i0 2.0 17 0 2 0\n"
