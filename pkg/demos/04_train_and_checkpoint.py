"""Train a small nested U-Net, keep the best epoch, and save it.

Takes a few seconds on one core. The history is written as CSV and
the best parameters as an NSEG1 checkpoint that reloads bit for bit.
"""
import tempfile
from pathlib import Path

from nseg import checkpoint, data as D, network as N
from nseg.metrics import dice_coefficient, pixel_accuracy
from nseg.training import TrainConfig, fit, history_csv

ds = D.synth_generate(24, 32, seed=0)
train, val = ds.subset(range(20)), ds.subset(range(20, 24))
train = D.augment_dataset(train, seed=0)  # augment the training part only

model = N.build_graph(N.GraphConfig(depth=3, base_channels=8), seed=0)
hp = TrainConfig(max_epochs=15, patience=10, early_stop_threshold=None)
best, history = fit(model, train, val, hp, seed=0)
print(history_csv(history))

prob = N.predict(best, val.images())
print(f"validation accuracy {pixel_accuracy(prob, val.masks()):.4f}, Dice {dice_coefficient(prob, val.masks()):.4f}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "best.nseg"
    checkpoint.save(best, path)
    again = checkpoint.load(path)
    print(f"checkpoint {path.stat().st_size} bytes;",
          "reloaded predictions identical:", (N.predict(again, val.images()) == prob).all())
