import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdroute import env
from mdroute import policy as pol
from mdroute.autodiff import Var
from mdroute.instances import ALL_VARIANTS, VariantFlags, generate_instance, make_rng
from mdroute.policy import PolicyConfig, init_params
from mdroute.rollout import rollout, rollout_batch

CFG = PolicyConfig()


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, seed=3)


def test_config_validation():
    with pytest.raises(ValueError):
        PolicyConfig(d=10, heads=4)
    assert PolicyConfig(d=128, heads=8).dk == 16
    small = set(init_params(CFG, 0))
    big = set(init_params(pol.FULL_SCALE, 0))
    assert small <= big
    assert {k.split(".")[0] for k in big - small} == {f"enc{i}" for i in range(CFG.layers, pol.FULL_SCALE.layers)}


def test_param_shapes(params):
    d = CFG.d
    assert params["embed.depot.W"].shape == (d, 2)
    assert params["embed.customer.W"].shape == (d, 6)
    assert params["film.gamma.W"].shape == (d, 5) and params["film.beta.b"].shape == (d,)
    assert params["dec.q.W"].shape == (d, d + 5)
    assert params["enc1.ff1.W"].shape == (CFG.ff_hidden, d)


class TestEmbed:
    def test_zero_customer_weights(self, params):
        p = dict(params, **{"embed.customer.W": np.zeros((CFG.d, 6))})
        inst = generate_instance(4, 2, seed=0)
        h = pol.embed(inst, p)
        assert np.array_equal(h[2:], np.tile(p["embed.customer.b"], (4, 1)))

    def test_depot_at_origin(self, build, params):
        inst = build([[0.0, 0.0]], [[0.5, 0.5]])
        assert np.array_equal(pol.embed(inst, params)[0], params["embed.depot.b"])

    def test_matches_dense_products(self, params):
        inst = generate_instance(2, 1, VariantFlags(time_window=True), seed=5)
        h = pol.embed(inst, params)
        dep = params["embed.depot.W"] @ inst.depot_coords[0] + params["embed.depot.b"]
        feats = np.array([*inst.customer_coords[1], inst.demand[1], inst.tw_early[1], inst.tw_late[1],
                          inst.service_time[1]])
        cus = params["embed.customer.W"] @ feats + params["embed.customer.b"]
        np.testing.assert_allclose(h[0], dep, atol=1e-14)
        np.testing.assert_allclose(h[2], cus, atol=1e-14)

    def test_inactive_tw_fields_are_zero(self):
        feats = generate_instance(3, 1, VariantFlags(), seed=0).customer_features()
        assert np.all(feats[:, 3:] == 0)


class TestFilm:
    def test_identity_init(self):
        p = init_params(CFG, 0, film_identity=True)
        h = make_rng(1).normal(size=(4, CFG.d))
        for flags in ALL_VARIANTS:
            assert np.array_equal(pol.film(h, flags.z, p), h)

    def test_bias_only_path(self, params):
        h = make_rng(2).normal(size=(3, CFG.d))
        out = pol.film(h, np.zeros(5), params)
        np.testing.assert_allclose(out, params["film.gamma.b"] * h + params["film.beta.b"], atol=1e-15)

    def test_conditioning_changes_output(self, params):
        h = make_rng(3).normal(size=(3, CFG.d))
        a = pol.film(h, VariantFlags().z, params)
        b = pol.film(h, VariantFlags(time_window=True).z, params)
        gamma = params["film.gamma.W"] @ VariantFlags(time_window=True).z + params["film.gamma.b"]
        beta = params["film.beta.W"] @ VariantFlags(time_window=True).z + params["film.beta.b"]
        np.testing.assert_allclose(b, gamma * h + beta, atol=1e-14)
        assert np.any(a != b)

    def test_wrong_z_length(self, params):
        with pytest.raises(ValueError):
            pol.film(np.zeros((2, CFG.d)), np.zeros(4), params)

    def test_depots_bypass_film(self, params):
        inst = generate_instance(4, 2, VariantFlags(), seed=1)
        other = generate_instance(4, 2, VariantFlags.from_name("MDVRPBL"), seed=1)
        hd, _ = pol.embed_batch(inst.depot_coords[None], inst.customer_features()[None],
                                {k: Var(v) for k, v in params.items()})
        np.testing.assert_array_equal(hd.value[0], pol.embed(other, params)[:2])


class TestEncoder:
    def test_attention_rows_sum_to_one(self, params):
        inst = generate_instance(5, 2, seed=2)
        weights = []
        pol.encode(pol.embed(inst, params), params, CFG, weights_out=weights)
        assert len(weights) == CFG.layers
        for w in weights:
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)

    def test_permutation_equivariance(self, params):
        h = make_rng(4).normal(size=(5, CFG.d))
        perm = np.array([3, 0, 4, 1, 2])
        np.testing.assert_allclose(pol.encode(h[perm], params, CFG), pol.encode(h, params, CFG)[perm], atol=1e-12)

    def test_single_node_attends_to_itself(self, params):
        h = Var(make_rng(5).normal(size=(1, 1, CFG.d)))
        P = {k: Var(v) for k, v in params.items()}
        out = pol.attention(h, P, "enc0.", CFG).value[0, 0]
        v = params["enc0.attn.v.W"] @ h.value[0, 0]
        np.testing.assert_allclose(out, params["enc0.attn.o.W"] @ v, atol=1e-14)

    def test_non_finite_reports_layer(self, params):
        h = np.ones((3, CFG.d))
        h[0, 0] = np.nan
        with pytest.raises(FloatingPointError):
            pol.encode(h, params, CFG)
        p = dict(params, **{"enc1.ff2.b": np.full(CFG.d, np.inf)})
        with pytest.raises(FloatingPointError, match="layer 1"), np.errstate(invalid="ignore"):
            pol.encode(np.ones((3, CFG.d)) + np.arange(3)[:, None], p, CFG)


class TestDecoder:
    def setup_method(self):
        self.inst = generate_instance(6, 2, VariantFlags.from_name("MDVRPLTW"), seed=6)
        self.params = init_params(CFG, 9)
        self.H = pol.encode_instance(self.inst, self.params, CFG)

    def test_masked_probabilities(self):
        state = env.step(self.inst, env.route_start_state(self.inst, 0), 3)
        mask = env.feasible_actions(self.inst, state)
        p = pol.decode_step(self.H, state, mask, self.params, CFG, self.inst)
        assert np.all(p[~np.array(mask)] == 0)
        assert p.sum() == pytest.approx(1.0, abs=1e-9) and np.all(p >= 0)

    def test_single_feasible_node(self):
        state = env.route_start_state(self.inst, 0)
        mask = [False] * self.inst.n_nodes
        mask[4] = True
        p = pol.decode_step(self.H, state, mask, self.params, CFG, self.inst)
        assert p[4] == 1.0

    def test_all_masked_rejected(self):
        state = env.route_start_state(self.inst, 0)
        with pytest.raises(ValueError):
            pol.decode_step(self.H, state, [False] * self.inst.n_nodes, self.params, CFG, self.inst)

    def test_clipped_compatibilities(self):
        big = {k: v * 50 for k, v in self.params.items()}
        H = pol.encode_instance(self.inst, big, CFG)
        P = {k: Var(v) for k, v in big.items()}
        cache = pol.precompute(Var(H[None]), P, CFG)
        mask = np.ones((1, 1, self.inst.n_nodes), dtype=bool)
        _, u = pol.decode_batch(cache, np.array([[2]]), np.zeros((1, 1, 5)), mask, P, CFG, return_logits=True)
        assert np.all(np.abs(u.value) <= CFG.clip) and np.abs(u.value).max() > 9

    def test_context_changes_distribution(self):
        s0 = env.step(self.inst, env.route_start_state(self.inst, 0), 3)
        mask = env.feasible_actions(self.inst, s0)
        p0 = pol.decode_step(self.H, s0, mask, self.params, CFG, self.inst)
        s1 = env.RolloutState(**{**{f: getattr(s0, f) for f in s0.__slots__}, "remaining_capacity": 0.1})
        p1 = pol.decode_step(self.H, s1, mask, self.params, CFG, self.inst)
        assert np.any(p0 != p1)


class TestSelect:
    def test_greedy(self):
        assert pol.select([0, 0.3, 0.7]) == 2
        assert pol.select([0.5, 0.5]) == 0

    def test_degenerate(self):
        with pytest.raises(ValueError):
            pol.select([0.0, 0.0])
        with pytest.raises(ValueError):
            pol.select([0.5, 0.5], mode="beam")

    def test_sampling_frequency(self):
        rng = make_rng(0)
        n = 100_000
        draws = pol.select_batch(np.tile([0.25, 0.75], (n, 1)), "sample", rng)
        sigma = np.sqrt(n * 0.25 * 0.75)
        assert abs(draws.sum() - 0.75 * n) < 3 * sigma

    def test_never_samples_zero_probability(self):
        probs = np.tile([0.2, 0.8, 0.0], (10_000, 1))
        assert pol.select_batch(probs, "sample", make_rng(1)).max() == 1

    def test_greedy_invariant_to_monotone_transform(self):
        p = make_rng(2).dirichlet(np.ones(7), size=50)
        np.testing.assert_array_equal(pol.select_batch(p, "greedy"), pol.select_batch(np.sqrt(p) * 3, "greedy"))


class TestRollout:
    def test_single_customer(self, build, params):
        inst = build([[0.0, 0.0]], [[0.3, 0.4]])
        (t,) = rollout(inst, params, CFG)
        assert t.actions == [0, 1, 0] and t.cost == pytest.approx(1.0)

    def test_greedy_is_deterministic(self, params):
        inst = generate_instance(6, 2, VariantFlags.from_name("MDVRPBTW"), seed=4)
        a = [t.actions for t in rollout(inst, params, CFG)]
        b = [t.actions for t in rollout(inst, params, CFG)]
        assert a == b

    def test_logprob_bookkeeping(self, params):
        insts = [generate_instance(5, 2, VariantFlags.from_name("MDVRPIL"), seed=s) for s in range(3)]
        trajs, logp = rollout_batch(insts, params, CFG, "sample", make_rng(0))
        for b, row in enumerate(trajs):
            for j, t in enumerate(row):
                assert t.logprob == pytest.approx(logp.value[b, j], abs=1e-12)
                assert np.all(np.array(t.step_logprobs) <= 0)

    def test_mixed_sizes_rejected(self, params):
        with pytest.raises(ValueError):
            rollout_batch([generate_instance(4, 2), generate_instance(5, 2)], params, CFG)

    @settings(max_examples=30)
    @given(st.integers(0, 2**32), st.integers(1, 6), st.integers(1, 3))
    def test_sampled_rollouts_are_feasible(self, seed, n, m):
        p = init_params(CFG, seed % 7)
        insts = [generate_instance(n, m, v, seed + i) for i, v in enumerate(ALL_VARIANTS)]
        for inst in insts:
            rollout_batch([inst], p, CFG, "sample", make_rng(seed), verify=True)

    def test_customer_relabeling(self, params):
        inst = generate_instance(5, 2, VariantFlags(), seed=8)
        perm = np.array([2, 0, 4, 1, 3])
        relabeled = type(inst)(depot_coords=inst.depot_coords, customer_coords=inst.customer_coords[perm],
                               raw_demand=inst.raw_demand[perm], is_backhaul=inst.is_backhaul[perm],
                               capacity=inst.capacity, flags=inst.flags, seed=inst.seed)
        H = pol.encode_instance(inst, params, CFG)
        H2 = pol.encode_instance(relabeled, params, CFG)
        s, s2 = env.route_start_state(inst, 1), env.route_start_state(relabeled, 1)
        p = pol.decode_step(H, s, env.feasible_actions(inst, s), params, CFG, inst)
        p2 = pol.decode_step(H2, s2, env.feasible_actions(relabeled, s2), params, CFG, relabeled)
        np.testing.assert_allclose(p2[2:], p[2:][perm], atol=1e-12)
        np.testing.assert_allclose(p2[:2], p[:2], atol=1e-12)


def test_film_identity_matches_unconditioned_policy():
    p = init_params(CFG, 4, film_identity=True)
    plain = PolicyConfig(use_film=False)
    for seed, name in enumerate(["MDVRP", "MDVRPBTW", "MDOVRPL", "MDVRPILTW"]):
        inst = generate_instance(5, 2, VariantFlags.from_name(name), seed)
        a = [t.actions for t in rollout(inst, p, CFG)]
        b = [t.actions for t in rollout(inst, p, plain)]
        assert a == b
        np.testing.assert_array_equal(pol.encode_instance(inst, p, CFG), pol.encode_instance(inst, p, plain))


def test_variant_flag_changes_encoding(params):
    base = generate_instance(5, 2, VariantFlags(), seed=2)
    other = generate_instance(5, 2, VariantFlags(open=True), seed=2)
    assert np.any(pol.encode_instance(base, params, CFG) != pol.encode_instance(other, params, CFG))
