"""Command-line driver: ``nseg <command> [options]``.

Commands: synth, augment, train, eval, crossval, prune, params, predict.
Options may also come from a flat ``key = value`` file passed with
``--config``; flags given on the command line win over the file.

Exit codes: 0 success, 1 usage or configuration error, 2 data or contract
error, 3 numeric abort (non-finite loss).
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import data as D
from . import evaluation as E
from .errors import ConfigurationError, ContractError, LeakageError, LoadError, NumericalError
from .metrics import dice_coefficient, pixel_accuracy
from .network import GraphConfig, build_graph, forward, param_count, predict, prune, reduction_table
from .pgm import write_pgm
from .training import TrainConfig, fit, write_history_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("nseg")


@dataclass
class RunConfig:
    """Every tunable of a run, with its default."""

    depth: int = 4
    base_channels: int = 8
    kernel: int = 3
    size: int = 64  # synthetic image side
    count: int = 40  # synthetic sample count
    batch_size: int = 4
    lr: float = 1e-3
    factor: float = 0.1
    patience: int = 3
    min_lr: float = 1e-5
    min_delta: float = 1e-4
    early_stop: float | None = 0.05  # "none" disables
    max_epochs: int = 400
    k: int = 10
    seed: int = 0
    deep_supervision: bool = True
    prune_level: int | None = None
    rotation: float = D.DEFAULT_ROTATION
    workers: int = 1
    threads: int | None = None

    def graph(self) -> GraphConfig:
        return GraphConfig(self.depth, self.base_channels, self.kernel,
                           deep_supervision=self.deep_supervision)

    def train(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, factor=self.factor, min_lr=self.min_lr,
                           min_delta=self.min_delta, early_stop_threshold=self.early_stop)


_FIELDS = {f.name for f in fields(RunConfig)}
_OPTIONAL = {"early_stop", "prune_level", "threads"}
_TYPES = {f.name: type(f.default) for f in fields(RunConfig) if f.name not in _OPTIONAL}
_TYPES.update(early_stop=float, prune_level=int, threads=int)


def _convert(key: str, text: str):
    text = text.strip()
    if key in _OPTIONAL and text.lower() in ("none", ""):
        return None
    kind = _TYPES[key]
    if kind is bool:
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigurationError(f"bad value for {key}: {text!r}")
        return low in ("true", "1", "yes")
    try:
        return kind(text)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from None


def read_config(path: str | Path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, value)
    return values


def defaults_text() -> str:
    """The canonical defaults listing, in config-file syntax."""
    cfg = RunConfig()
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


# -- argument parsing ------------------------------------------------------------------

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_run_options(p: argparse.ArgumentParser, names):
    """Add ``--<name>`` flags; unset flags stay absent so file values and defaults show through."""
    for name in names:
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, default=argparse.SUPPRESS, metavar=name.upper(),
                       type=lambda s, n=name: _convert(n, s))


MODEL_OPTS = ["depth", "base_channels", "kernel", "deep_supervision"]
TRAIN_OPTS = ["batch_size", "lr", "factor", "patience", "min_lr", "min_delta",
              "early_stop", "max_epochs", "rotation"]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nseg", description="Nested U-Net segmentation toolkit.")
    parser.add_argument("--config", help="flat key = value file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="write a synthetic PGM dataset")
    p.add_argument("--out", required=True)
    _add_run_options(p, ["count", "size"])

    p = sub.add_parser("augment", help="double a dataset with rotated copies")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_run_options(p, ["rotation"])

    p = sub.add_parser("train", help="fit a model; writes best.nseg and history.csv")
    p.add_argument("--data", required=True)
    p.add_argument("--val", help="validation dataset (default: seeded 10%% holdout of --data)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--augment", action="store_true", help="augment the training part only")
    _add_run_options(p, MODEL_OPTS + TRAIN_OPTS)

    p = sub.add_parser("eval", help="accuracy and Dice of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--head", type=int, help="read the mask from head d instead of the final one")
    _add_run_options(p, ["batch_size"])

    p = sub.add_parser("crossval", help="K-fold cross-validation report")
    p.add_argument("--data", required=True)
    p.add_argument("--k-sweep", help="comma-separated fold counts, e.g. 5,6,7")
    p.add_argument("--paper-order", action="store_true",
                   help="augment before splitting (leaks rotated validation copies)")
    p.add_argument("--holdout", action="store_true", help="single 90/10 split baseline")
    p.add_argument("--out", help="report CSV path (default: stdout)")
    _add_run_options(p, MODEL_OPTS + TRAIN_OPTS + ["k", "workers"])

    p = sub.add_parser("prune", help="rewrite a checkpoint at a lower prune level")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_run_options(p, ["prune_level"])

    p = sub.add_parser("params", help="closed-form parameter budget per prune level")
    _add_run_options(p, ["depth", "base_channels", "kernel"])
    p.add_argument("--base", dest="base_channels", type=int, default=argparse.SUPPRESS,
                   help="alias of --base-channels")

    p = sub.add_parser("predict", help="write thresholded masks for every image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_run_options(p, ["batch_size"])

    sub.add_parser("defaults", help="print the default configuration")
    for p in sub.choices.values():
        _add_run_options(p, ["seed", "threads"])
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    values = read_config(args.config) if args.config else {}
    for name in _FIELDS:
        if hasattr(args, name):
            values[name] = getattr(args, name)
    return dataclasses.replace(RunConfig(), **values)


# -- commands ---------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig):
    ds = D.synth_generate(cfg.count, cfg.size, cfg.seed)
    D.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples of {cfg.size}x{cfg.size} to {args.out}")


def cmd_augment(args, cfg: RunConfig):
    ds = D.augment_dataset(D.load_dataset(args.data), cfg.rotation, cfg.seed)
    D.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")


def _train_val(args, cfg: RunConfig):
    ds = D.load_dataset(args.data)
    if args.val:
        train, val = ds, D.load_dataset(args.val)
    else:
        n_val = max(1, int(math.floor(0.1 * len(ds) + 0.5)))
        if n_val >= len(ds):
            raise ContractError(f"dataset of {len(ds)} samples is too small to hold out validation")
        perm = np.random.default_rng(cfg.seed).permutation(len(ds))
        train, val = ds.subset(sorted(perm[n_val:]), "train"), ds.subset(sorted(perm[:n_val]), "val")
    if args.augment:
        train = D.augment_dataset(train, cfg.rotation, cfg.seed)
    return train, val


def cmd_train(args, cfg: RunConfig):
    train, val = _train_val(args, cfg)
    model = build_graph(cfg.graph(), cfg.seed)
    best, history = fit(model, train, val, cfg.train(), cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(best, out / "best.nseg")
    write_history_csv(history, out / "history.csv")
    top = max(history, key=lambda r: r.val_acc)
    print(f"trained {len(history)} epochs; best val_acc {top.val_acc:.6f} at epoch {top.epoch}")


def head_probabilities(model, images: np.ndarray, head: int | None, batch_size: int) -> np.ndarray:
    """Probability maps from ``head`` of an unpruned forward pass (final head if None)."""
    if head is None:
        return predict(model, images, batch_size)
    if head not in model.active_heads:
        raise ContractError(f"head {head} is not active; available heads {model.active_heads}")
    k = model.active_heads.index(head)
    return np.concatenate([forward(model, images[s:s + batch_size], "infer").outputs[k]
                           for s in range(0, len(images), batch_size)], axis=0)


def cmd_eval(args, cfg: RunConfig):
    model = checkpoint.load(args.checkpoint)
    ds = D.load_dataset(args.data)
    prob = head_probabilities(model, ds.images(model.dtype), args.head, cfg.batch_size)
    mask = ds.masks()
    print("accuracy,dice")
    print(f"{pixel_accuracy(prob, mask):.6f},{dice_coefficient(prob, mask):.6f}")


def cmd_crossval(args, cfg: RunConfig):
    ds = D.load_dataset(args.data)
    order = E.PAPER_ORDER if args.paper_order else E.AFTER_SPLIT
    kw = dict(order=order, rotation=cfg.rotation, workers=cfg.workers)
    if args.holdout:
        reports = [E.holdout_evaluate(cfg.graph(), ds, cfg.seed, cfg.train(), rotation=cfg.rotation)]
    elif args.k_sweep:
        try:
            ks = [int(k) for k in args.k_sweep.split(",")]
        except ValueError:
            raise UsageError(f"--k-sweep expects comma-separated integers, got {args.k_sweep!r}") from None
        reports = E.k_sweep(cfg.graph(), ds, ks, cfg.seed, cfg.train(), **kw)
    else:
        reports = [E.cross_validate(cfg.graph(), ds, cfg.k, cfg.seed, cfg.train(), **kw)]
    text = E.report_csv(reports)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_prune(args, cfg: RunConfig):
    if cfg.prune_level is None:
        raise UsageError("prune needs --prune-level")
    model = checkpoint.load(args.checkpoint)
    before = model.n_parameters()
    pruned = prune(model, cfg.prune_level)
    after = pruned.n_parameters()
    checkpoint.save(pruned, args.out)
    print(f"parameters before: {before}")
    print(f"parameters after:  {after}")
    print(f"reduction: {100.0 * (before - after) / before:.2f}%")


def cmd_params(args, cfg: RunConfig):
    gc = GraphConfig(cfg.depth, cfg.base_channels, cfg.kernel)
    print("d,params,reduction_vs_full,reduction_vs_next")
    table = reduction_table(gc)
    for d, count, vs_full in table:
        vs_next = ""
        if d + 1 < gc.depth:
            nxt = param_count(gc, d + 1)
            vs_next = f"{100.0 * (nxt - count) / nxt:.2f}%"
        print(f"{d},{count},{vs_full:.2f}%,{vs_next}")


def cmd_predict(args, cfg: RunConfig):
    model = checkpoint.load(args.checkpoint)
    ds = D.load_dataset(args.data, require_masks=False)
    prob = predict(model, ds.images(model.dtype), cfg.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s, p in zip(ds, prob):
        write_pgm(out / f"{s.stem}{D.MASK_SUFFIX}.pgm", D.mask_to_u8(p[0] >= 0.5))
    print(f"wrote {len(ds)} masks to {out}")


def cmd_defaults(args, cfg: RunConfig):
    sys.stdout.write(defaults_text())


COMMANDS = {
    "synth": cmd_synth, "augment": cmd_augment, "train": cmd_train, "eval": cmd_eval,
    "crossval": cmd_crossval, "prune": cmd_prune, "params": cmd_params,
    "predict": cmd_predict, "defaults": cmd_defaults,
}


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit(cfg.threads):
            COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"nseg: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"nseg: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, LoadError, LeakageError, OSError) as exc:
        print(f"nseg: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
