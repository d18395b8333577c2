"""K-fold cross-validation with augmentation applied after the split.

Each fold trains a fresh model on the other folds (plus rotated copies of
them) and scores the held-out fold. The report is CSV with one row per
fold and a mean +/- sample std row. Runs in about twenty seconds.
"""
from nseg import data as D, evaluation as E, network as N
from nseg.training import TrainConfig

ds = D.synth_generate(20, 32, seed=1)
plan = E.kfold_split(len(ds), 4, seed=0)
print("fold plan:", plan.to_json())

cfg = N.GraphConfig(depth=3, base_channels=8)
# a 16-image training fold gives short epochs, so allow a longer plateau before cutting lr
hp = TrainConfig(max_epochs=20, patience=10, early_stop_threshold=None)
report = E.cross_validate(cfg, ds, 4, seed=0, hyperparams=hp)
print(E.report_csv([report]))

# the plumbing check: feeding the true mask back scores perfectly
oracle = E.cross_validate(cfg, ds, 4, seed=0, trainer=E.oracle_trainer)
print("oracle predictor:", oracle.csv_rows(with_folds=False)[0])
