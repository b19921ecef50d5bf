"""A short PO training run on MDVRP, then a before/after comparison.

``python3 demos/train_tiny.py [epochs]`` (default 5; each epoch is 2000
instances, roughly 5 s on one core).
"""

import sys

import numpy as np

from mdroute.instances import VariantFlags, generate_instance
from mdroute.oracle import exhaustive_solve, gap
from mdroute.policy import init_params
from mdroute.rollout import best_cost
from mdroute.training import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
config = TrainConfig(n=8, m=2, epochs=epochs, sampler="fixed", variants=("MDVRP",), loss="po")
cfg = config.policy

held = [generate_instance(6, 2, VariantFlags(), seed=500 + i) for i in range(30)]
opt = np.array([exhaustive_solve(i).cost for i in held])

before = best_cost(held, init_params(cfg, config.seed), cfg)
result = train(config, log=print)
after = best_cost(held, result.params, cfg)

print(f"\nmean gap to optimum on 30 held-out n=6 instances: "
      f"{np.mean([gap(c, o) for c, o in zip(before, opt)]):.1f}% untrained, "
      f"{np.mean([gap(c, o) for c, o in zip(after, opt)]):.1f}% after {epochs} epochs")
