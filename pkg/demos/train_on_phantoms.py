# Train a small MeshNet on synthetic lesion phantoms, then segment a phantom
# it has never seen and score the result.
#
#   python demos/train_on_phantoms.py [epochs]
#
# With the default 50 epochs this takes a few minutes on one CPU core.

import sys
import time

import numpy as np

from meshvox import engine, meshnet, metrics, train
from meshvox.meshnet import MeshNetConfig
from meshvox.phantom import make_dataset, make_phantom

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 50

# %% Data: textured 24^3 volumes with one or two bright ellipsoids each
train_set = make_dataset(20, shape=(24, 24, 24), seed=1)
val_set = make_dataset(5, shape=(24, 24, 24), seed=2)
v, m = train_set[0]
print("volume", v.shape, v.data.dtype, f"range [{v.data.min():.2f}, {v.data.max():.2f}]")
print("lesion voxels in the first phantom:", int(m.data.sum()))

# %% A narrow network with dilations capped at 4 keeps the receptive field
# (59 voxels) in proportion to the 24^3 field of view
cfg = MeshNetConfig(5, meshnet.capped_dilations(4), input_shape=(24, 24, 24))
print(f"{meshnet.count_parameters(cfg)} parameters, receptive field {meshnet.receptive_field(cfg)}")

# %% The recipe: AdamW, one-cycle schedule, smoothed and class-weighted loss
run = train.TrainRunConfig(epochs=epochs, restarts=1, seed=0)
print(run.optimizer)
print(run.loss)


def show(row):
    if row["epoch"] % 5 == 4 or row["epoch"] == 0:
        print(f"epoch {row['epoch'] + 1:3d}  lr {row['lr']:.2e}  loss {row['loss']:.4f}  val dice {row['val_dice']:.3f}")


t0 = time.time()
weights, history = train.train(cfg, train_set, run, val_set=val_set, progress=show)
print(f"best validation DICE {max(r['val_dice'] for r in history):.3f} after {time.time() - t0:.0f} s")

# %% Fold batch norm into the convolutions and segment an unseen phantom
model = meshnet.fold_batchnorm(meshnet.from_weights(cfg, weights))
print("folded model:", model.n_parameters, "parameters")
v, truth = make_phantom((24, 24, 24), rng=12345)
pred = engine.infer(model, v)
scores = metrics.evaluate(pred, truth)
print({k: round(s, 3) if isinstance(s, float) else s for k, s in scores.items()})

# %% A rough picture of one slice: '#' hit, '+' missed, '.' false alarm
z = int(np.argmax(truth.data.sum(axis=(1, 2))))
for row_p, row_t in zip(pred.data[z], truth.data[z]):
    print("".join("#" if p and t else "+" if t else "." if p else " " for p, t in zip(row_p, row_t)))

# %% Save in the MNET1 format for `meshvox infer`
meshnet.save_model(meshnet.from_weights(cfg, weights), "phantom_model.mnet")
print("wrote phantom_model.mnet")
