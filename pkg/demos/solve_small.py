"""Generate one instance per variant family, solve it three ways and compare.

Run with ``python3 demos/solve_small.py``.  Prints the exhaustive optimum,
the greedy heuristic and an untrained policy's best multi-start rollout.
"""

from mdroute.checker import check_feasible
from mdroute.instances import VariantFlags, generate_instance
from mdroute.oracle import exhaustive_solve, gap, greedy_solve
from mdroute.policy import PolicyConfig, init_params
from mdroute.rollout import best_solutions

cfg = PolicyConfig()
params = init_params(cfg, seed=0)

print(f"{'variant':<18}{'optimum':>9}{'greedy':>9}{'policy':>9}{'gap%':>8}")
for name in ("MDVRP", "MDOVRP", "MDVRPB", "MDVRPLTW", "MDVRPI", "MDVRPBLTW:strict"):
    inst = generate_instance(6, 2, VariantFlags.from_name(name), seed=3)
    opt = exhaustive_solve(inst)
    greedy = greedy_solve(inst)
    (cost, actions), = best_solutions([inst], params, cfg, starts="full", augment8=True)
    assert check_feasible(inst, actions).ok
    print(f"{name:<18}{opt.cost:9.4f}{greedy.cost:9.4f}{cost:9.4f}{gap(cost, opt.cost):8.1f}")

# the optimal action sequence for the last one, route by route
inst = generate_instance(6, 2, VariantFlags.from_name("MDVRPI"), seed=3)
print("\nMDVRPI optimum:", exhaustive_solve(inst).solution.actions)
print("depots are nodes 0..1; a depot other than the route's first node is a reload")
