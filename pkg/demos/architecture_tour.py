# A tour of the network: parameter counts, receptive field, and what it costs
# to run a whole 256^3 volume through it.
#
#   python demos/architecture_tour.py

import numpy as np

from meshvox import Volume, engine, meshnet
from meshvox.meshnet import MeshNetConfig

# %% Parameter counts grow quadratically in the channel width
for x in (5, 16, 21, 26):
    cfg = MeshNetConfig(x)
    folded = meshnet.fold_batchnorm(meshnet.build(cfg)).n_parameters
    print(f"X={x:2d}  parameters {meshnet.count_parameters(cfg):7,d}  after BN folding {folded:7,d}")

# %% The dilation schedule sets the receptive field, not the width
print()
print("canonical dilations", meshnet.CANONICAL_DILATIONS, "-> RF", meshnet.receptive_field(MeshNetConfig(5)))
for cap in (2, 4, 8):
    d = meshnet.capped_dilations(cap)
    print(f"capped at {cap:2d}: {d} -> RF {meshnet.receptive_field(MeshNetConfig(5, d))}")

# %% Check the receptive field empirically: poke one voxel and see what moves
m = meshnet.build(MeshNetConfig(1, meshnet.capped_dilations(4)))
for layer in m.layers:
    layer.conv.weights[:] = 1.0 / layer.conv.weights[0].size
x = np.zeros((80, 80, 80), np.float32)
x[40, 40, 40] = 1
moved = np.argwhere(np.any(m.forward(x) != m.forward(np.zeros_like(x)), axis=0))
print("influence box:", (moved.max(0) - moved.min(0) + 1).tolist())

# %% Memory plans for a full 256^3 volume at X=26
cfg = MeshNetConfig(26)
for budget_mib in (8192, 2048, 512):
    plan = engine.plan(cfg, (256, 256, 256), budget_mib * 2**20)
    print(f"\nbudget {budget_mib} MiB")
    print(plan.describe())

# %% Whole-volume and halo-tiled execution give the same bits
m = meshnet.init_model(MeshNetConfig(2, meshnet.capped_dilations(2)), seed=0)
v = Volume(np.random.default_rng(0).random((48, 48, 48), dtype=np.float32))
_, whole = engine.infer(m, v, return_logits=True)
tight = engine.plan(m.config, v.shape, 3_300_000)  # about a tenth of whole-volume needs
_, tiled = engine.infer(m, v, tight, return_logits=True)
print(f"\ntiled plan {tight.tile_shape} + halo {tight.halo}: identical = {whole.tobytes() == tiled.tobytes()}")
