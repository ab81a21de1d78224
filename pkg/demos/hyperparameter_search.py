# Asynchronous successive halving over the MeshNet search space, driven by
# a cheap analytic objective so the whole search runs in a second.
#
#   python demos/hyperparameter_search.py

import math

from meshvox import hpo

space = hpo.SearchSpace()
rungs = hpo.rung_fidelities(space.epochs[0], space.epochs[1], 3)
print("space:", space.to_dict())
print("rungs (epochs):", rungs)

# %% Watch every scheduling decision and check the promotion quota as we go
log = []


def watch(trials, decision):
    for k in range(len(rungs) - 1):
        n_k = sum(1 for t in trials.values() if k in t.scores)
        left = sum(1 for t in trials.values() if t.rung > k)
        assert left <= math.ceil(n_k / 3)
    log.append(decision.action)


result = hpo.run_search(space, budget_trials=27, workers=1, seed=0, objective=hpo.synthetic_objective,
                        on_decision=watch)
print({a: log.count(a) for a in sorted(set(log))})

# %% Who survived each rung
for k, fidelity in enumerate(rungs):
    alive = [t for t in result.trials.values() if k in t.scores]
    best = max(alive, key=lambda t: t.scores[k])
    print(f"rung {k} ({fidelity:2d} epochs): {len(alive):2d} trials, best #{best.trial_id} {best.scores[k]:.3f}")

print("\nwinner:", result.best.trial_id)
for key, value in result.best.config.items():
    print(f"  {key:18s} {value}")

# %% Four workers: the schedule differs but the quota never breaks
parallel = hpo.run_search(space, 27, workers=4, seed=0, objective=hpo.synthetic_objective, on_decision=watch)
print("\nparallel winner:", parallel.best.trial_id, "top-rung trials:",
      sorted(t.trial_id for t in parallel.trials.values() if len(rungs) - 1 in t.scores))
