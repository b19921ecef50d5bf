import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdroute import env
from mdroute.instances import (ALL_VARIANTS, DIHEDRAL_INVERSE, MAX_ROUTE_LIMIT, VARIANT_NAMES, VariantFlags,
                               audit_instance, augment, backhaul_count, capacity_for, generate_instance,
                               make_rng, sample_route_limit)
from mdroute.oracle import greedy_solve

variants = st.sampled_from(ALL_VARIANTS)
seeds = st.integers(0, 2**64 - 1)


def brute_d_star(inst):
    return max(math.hypot(dx - cx, dy - cy) for dx, dy in inst.depot_coords for cx, cy in inst.customer_coords)


class TestVariantFlags:
    def test_table_has_24_distinct_variants(self):
        assert len(VARIANT_NAMES) == 24
        assert len({v.name for v in ALL_VARIANTS}) == 24

    @pytest.mark.parametrize("name", VARIANT_NAMES)
    def test_name_round_trip(self, name):
        assert VariantFlags.from_name(name).name == name

    def test_open_and_inter_depot_exclusive(self):
        with pytest.raises(ValueError):
            VariantFlags.from_name("MDOVRPI")
        with pytest.raises(ValueError):
            VariantFlags(open=True, inter_depot=True)

    def test_z_order_is_b_l_o_tw_i(self):
        f = VariantFlags(backhaul=True, time_window=True)
        assert f.z.tolist() == [1, 0, 0, 1, 0]
        assert VariantFlags.from_name("MDVRPI").z.tolist() == [0, 0, 0, 0, 1]
        assert VariantFlags.from_name("MDOVRPL").z.tolist() == [0, 1, 1, 0, 0]

    def test_strict_mode_token(self):
        f = VariantFlags.from_name("MDVRPB:strict")
        assert f.backhaul_mode == "strict" and f.token == "MDVRPB:strict"
        with pytest.raises(ValueError):
            VariantFlags(backhaul_mode="sometimes")


class TestGeneration:
    def test_n50_backhaul_example(self):
        inst = generate_instance(50, 3, VariantFlags(backhaul=True), seed=7)
        assert inst.capacity == 40
        assert int(inst.is_backhaul.sum()) == 10

    def test_minimal_instance(self):
        inst = generate_instance(1, 1, VariantFlags(), seed=0)
        assert inst.m == 1 and inst.n == 1
        assert 1 <= inst.raw_demand[0] <= 9
        assert inst.demand[0] == inst.raw_demand[0] / 40

    def test_route_limit_example(self):
        inst = generate_instance(5, 2, VariantFlags(limit=True), seed=42)
        d_star = brute_d_star(inst)
        assert 2 * d_star <= inst.route_limit <= max(MAX_ROUTE_LIMIT, 2 * d_star)

    def test_capacity_anchors_and_clamp(self):
        assert capacity_for(50) == 40 and capacity_for(100) == 50
        assert capacity_for(75) == 45
        assert capacity_for(6) == 40 and capacity_for(400) == 50

    def test_rejects_empty_sizes(self):
        with pytest.raises(ValueError):
            generate_instance(0, 1)
        with pytest.raises(ValueError):
            generate_instance(3, 0)

    def test_deterministic(self):
        for v in ALL_VARIANTS:
            assert generate_instance(7, 3, v, 99) == generate_instance(7, 3, v, 99)

    def test_flags_share_underlying_draws(self):
        a = generate_instance(6, 2, VariantFlags(), 5)
        b = generate_instance(6, 2, VariantFlags.from_name("MDVRPBLTW"), 5)
        np.testing.assert_array_equal(a.customer_coords, b.customer_coords)
        np.testing.assert_array_equal(a.raw_demand, b.raw_demand)

    def test_backhaul_count(self):
        assert [backhaul_count(n) for n in (1, 4, 5, 6, 10, 50, 100)] == [1, 1, 1, 2, 2, 10, 20]

    @settings(max_examples=1000)
    @given(variants, seeds, st.integers(1, 12), st.integers(1, 4))
    def test_generator_invariants(self, flags, seed, n, m):
        inst = generate_instance(n, m, flags, seed)
        assert audit_instance(inst) == []
        assert inst.flags == flags
        assert (inst.route_limit is not None) == flags.limit
        assert (inst.tw_early is not None) == flags.time_window
        assert inst.is_backhaul.any() == flags.backhaul
        assert np.all(inst.demand[~inst.is_backhaul] > 0)
        assert np.all(inst.demand[~inst.is_backhaul] <= 9 / inst.capacity)

    @given(variants, seeds, st.integers(1, 10))
    def test_demand_normalization_exact(self, flags, seed, n):
        inst = generate_instance(n, 2, flags, seed)
        C = inst.capacity
        exact = [Fraction(int(r), C) for r in inst.signed_raw_demand]
        assert sum(exact) * C == int(inst.signed_raw_demand.sum())
        # each float is the correctly rounded value of its rational
        assert all(float(q) == d for q, d in zip(exact, inst.demand))


class TestRouteLimit:
    def test_coincident_points(self):
        D = sample_route_limit([[0.4, 0.4]], [[0.4, 0.4]], make_rng(1))
        assert 0.0 <= D <= 3.0

    def test_three_four_five(self):
        for s in range(50):
            D = sample_route_limit([[0, 0]], [[0.6, 0.8]], make_rng(s))
            assert 2.0 <= D <= 3.0

    def test_brute_force_bounds(self):
        rng = make_rng(11)
        depots, cust = rng.random((3, 2)), rng.random((4, 2))
        d_star = max(math.hypot(*(d - c)) for d in depots for c in cust)
        D = sample_route_limit(depots, cust, make_rng(3))
        assert 2 * d_star - 1e-12 <= D <= max(3.0, 2 * d_star)

    def test_collapse_when_far(self):
        # 2*d* <= 2*sqrt(2) < 3 inside the unit square, so leave it to force the branch
        D = sample_route_limit([[0, 0]], [[1.5, 2.0]], make_rng(0))
        assert D == 5.0


class TestAugment:
    def test_identity(self):
        inst = generate_instance(5, 2, seed=3)
        assert augment(inst, 0) == inst

    def test_reflection_example(self, build):
        inst = build([[0.5, 0.5]], [[0.2, 0.7]])
        np.testing.assert_allclose(augment(inst, 4).customer_coords, [[0.8, 0.7]])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            augment(generate_instance(3, 1), 8)

    def test_fixed_solution_cost_on_all_maps(self):
        inst = generate_instance(8, 2, VariantFlags(), seed=17)
        sol = greedy_solve(inst)
        costs = [-env.reward(augment(inst, k), sol.actions) for k in range(8)]
        assert max(costs) - min(costs) <= 1e-12

    @given(variants, seeds, st.integers(0, 7))
    def test_inverse_and_isometry(self, flags, seed, k):
        inst = generate_instance(6, 3, flags, seed)
        aug = augment(inst, k)
        back = augment(aug, DIHEDRAL_INVERSE[k])
        np.testing.assert_allclose(back.coords, inst.coords, atol=1e-15)
        np.testing.assert_allclose(aug.dist, inst.dist, atol=1e-12)
        assert np.array_equal(aug.raw_demand, inst.raw_demand) and aug.flags == inst.flags
