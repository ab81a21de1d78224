# The evaluation protocol end to end on made-up numbers: stratified nested
# splits, per-subject scores for a few models, and a Holm-corrected Wilcoxon
# comparison against a baseline.
#
#   python demos/compare_models.py

from collections import Counter

import numpy as np

from meshvox import evalkit

rng = np.random.default_rng(0)

# %% A roster of 224 subjects with lesion volumes (voxels) and scanner type
lo, hi = evalkit.DEFAULT_CUTOFFS[0] + 1, evalkit.DEFAULT_CUTOFFS[-1]
subjects = [
    evalkit.SubjectRecord(f"sub-{i:03d}", int(np.exp(rng.uniform(np.log(lo), np.log(hi)))), str(rng.choice(["A", "B"])))
    for i in range(224)
]
print(Counter((evalkit.stratum_of(s.lesion_vol), s.acquisition) for s in subjects))

# %% 3 x 3 nested folds, balanced within every (stratum, acquisition) cell
plan = evalkit.make_splits(subjects, n_outer=3, n_inner=3, seed=0)
for k, (train_ids, test_ids) in enumerate(plan.outer_folds):
    inner = [len(va) for _, va in plan.inner_folds[k]]
    print(f"outer fold {k}: train {len(train_ids)}  test {len(test_ids)}  inner val sizes {inner}")

# %% Held-out scores for a baseline and three challengers
table = evalkit.ScoreTable()
for s in subjects[:60]:
    base = rng.uniform(0.65, 0.9)
    table.add(s.subject_id, "baseline", dice=base, avd=rng.uniform(0.1, 0.4), mcc=base - 0.02)
    table.add(s.subject_id, "wider", dice=base + rng.normal(0.005, 0.02), avd=rng.uniform(0.1, 0.4), mcc=base)
    table.add(s.subject_id, "shallow", dice=base - rng.uniform(0.02, 0.08), avd=rng.uniform(0.2, 0.5),
              mcc=base - 0.06)
    table.add(s.subject_id, "noisy", dice=base + rng.normal(0, 0.05), avd=rng.uniform(0.1, 0.4), mcc=base - 0.02)

rows = evalkit.compare_models(table, "baseline", alpha=0.05)
print(evalkit.format_table(rows))

# %% The exact test underneath, on a tiny case
result = evalkit.wilcoxon_signed_rank([0.81, 0.77, 0.9, 0.68, 0.74], [0.7, 0.7, 0.8, 0.6, 0.7])
print(result)
print("Holm on [0.01, 0.04, 0.03]:", evalkit.holm([0.01, 0.04, 0.03])[0])
