"""Command-line entry point: ``meshvox <subcommand> ...``.

Exit status is 0 on success, 1 on a usage error and 2 on a data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import engine, evalkit, hpo, meshnet, metrics, nifti, train, voxel

log = logging.getLogger("meshvox")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _size(text) -> int:
    """Bytes, with optional K/M/G suffix (binary multiples)."""
    text = text.strip().upper().rstrip("B")
    mult = {"K": 2**10, "M": 2**20, "G": 2**30}.get(text[-1:], 1)
    if mult != 1:
        text = text[:-1]
    try:
        v = int(float(text) * mult)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return v


def _csv_ints(text):
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meshvox", description="MeshNet lesion segmentation toolkit")
    p.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1, help="max parallel workers")
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--quiet", action="store_true", help="suppress informational output")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("describe", help="parameter count, receptive field and memory plans")
    s.add_argument("--channels", type=_positive_int, required=True)
    s.add_argument("--dilations", type=_csv_ints, default=meshnet.CANONICAL_DILATIONS)
    s.add_argument("--shape", type=_positive_int, default=256, help="cubic input edge")

    s = sub.add_parser("conform", help="resample to 256^3 at 1 mm and rescale to [0, 1]")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--labels", action="store_true", help="nearest-neighbour, no rescale")

    s = sub.add_parser("infer", help="segment a conformed volume")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--budget", type=_size, default=None, help="memory budget in bytes (K/M/G suffixes allowed)")
    s.add_argument("--logits", default=None, help="also write logits as .npy")

    s = sub.add_parser("train", help="train a MeshNet on one inner fold")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True, help="directory with images/ and labels/ NIfTI files")
    s.add_argument("--split", required=True, help="split plan JSON from 'splits'")
    s.add_argument("--out", required=True, help="output MNET1 weight file")
    s.add_argument("--history", default=None, help="per-epoch history CSV")
    s.add_argument("--outer", type=int, default=0)
    s.add_argument("--inner", type=int, default=0)

    s = sub.add_parser("metrics", help="DICE, AVD and MCC of a predicted mask")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--json", action="store_true")

    s = sub.add_parser("splits", help="stratified nested cross-validation plan")
    s.add_argument("--subjects", required=True, help="CSV: subject_id, lesion_vol, acquisition")
    s.add_argument("--outer", type=_positive_int, default=3)
    s.add_argument("--inner", type=_positive_int, default=3)
    s.add_argument("--out", required=True)

    s = sub.add_parser("stats", help="Holm-corrected Wilcoxon comparison table")
    s.add_argument("--scores", required=True, help="CSV: subject_id, model, dice, avd, mcc")
    s.add_argument("--baseline", required=True)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--zero-method", choices=("wilcox", "pratt"), default="wilcox")
    s.add_argument("--out", default=None, help="also write the report as CSV")

    s = sub.add_parser("hpo", help="ASHA hyperparameter search")
    s.add_argument("--space", required=True, help="search space JSON")
    s.add_argument("--budget", type=_positive_int, required=True, help="number of trials")
    s.add_argument("--workers", type=_positive_int, default=1)
    s.add_argument("--out", required=True, help="ledger CSV (appended; resumes if present)")
    s.add_argument("--eta", type=int, default=3)
    s.add_argument("--synthetic", action="store_true", help="use the analytic objective instead of training")
    s.add_argument("--data", default=None)
    s.add_argument("--split", default=None)
    s.add_argument("--config", default=None, help="base training config")
    return p


def _say(args, text: str):
    if not args.quiet:
        print(text)


def _load_dataset(data_dir: Path, ids) -> dict:
    out = {}
    for sid in ids:
        img = _find(data_dir / "images", sid)
        lab = _find(data_dir / "labels", sid)
        out[sid] = (nifti.read_volume(img), nifti.read_label_mask(lab))
    return out


def _find(folder: Path, sid: str) -> Path:
    for ext in (".nii.gz", ".nii"):
        p = folder / f"{sid}{ext}"
        if p.exists():
            return p
    raise DataError(f"no NIfTI file for subject {sid!r} in {folder}")


def cmd_describe(args):
    cfg = meshnet.MeshNetConfig(args.channels, args.dilations, strict=False)
    shape = (args.shape,) * 3
    _say(args, f"MeshNet-{cfg.channels}  dilations {','.join(map(str, cfg.dilations))}")
    print(f"parameters: {meshnet.count_parameters(cfg)}")
    print(f"folded parameters: {meshnet.fold_batchnorm(meshnet.build(cfg)).n_parameters}")
    print(f"receptive field: {meshnet.receptive_field(cfg)}")
    rows = []
    for budget in (16 * 2**30, 8 * 2**30, 4 * 2**30, 2 * 2**30, 2**30, 512 * 2**20, 256 * 2**20):
        try:
            pl = engine.plan(cfg, shape, budget)
            tile = "-" if pl.tile_shape is None else f"{pl.tile_shape[0]}+2x{pl.halo}"
            rows.append((f"{budget / 2**20:,.0f} MiB", pl.strategy, tile, f"{pl.est_peak_bytes / 2**20:,.1f} MiB"))
        except engine.BudgetTooSmallError as exc:
            rows.append((f"{budget / 2**20:,.0f} MiB", "infeasible", "-", f"min {exc.minimum / 2**20:,.1f} MiB"))
    if not args.quiet:
        header = ("budget", "strategy", "tile", "est. peak")
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(4)]
        print(f"memory plans for {args.shape}^3 float32 input:")
        for r in [header, *rows]:
            print("  " + "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return 0


def cmd_conform(args):
    v = nifti.read_label_mask(args.input) if args.labels else nifti.read_volume(args.input)
    if args.labels:
        out = voxel.conform_labels(v)
        nifti.write_volume(out, args.out, "u8")
    else:
        out = voxel.conform(v)
        nifti.write_volume(out, args.out, "f32")
    _say(args, f"wrote {args.out} {out.shape} @ {out.spacing} mm")
    return 0


def cmd_infer(args):
    model = meshnet.load_model(args.model)
    v = nifti.read_volume(args.input)
    if model.config.input_shape is not None and tuple(v.shape) != tuple(model.config.input_shape):
        raise DataError(f"input shape {v.shape} does not match model grid {model.config.input_shape}; run 'conform' first")
    budget = args.budget or 2**62
    pl = engine.plan(model.config, v.shape, budget, workers=min(args.threads, 4), keep_logits=args.logits is not None)
    log.info("%s", pl.describe())
    result = engine.infer(model, v, pl, return_logits=args.logits is not None, workers=min(args.threads, pl.workers))
    mask, logits = result if args.logits is not None else (result, None)
    nifti.write_volume(mask, args.out, "u8")
    if logits is not None:
        np.save(args.logits, logits)
    _say(args, f"wrote {args.out}: {voxel.lesion_volume(mask)} lesion voxels ({pl.strategy})")
    return 0


def cmd_train(args):
    net_cfg, run = train.load_train_config(args.config)
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    plan = evalkit.SplitPlan.from_json(Path(args.split).read_text())
    try:
        train_ids, val_ids = plan.inner_folds[args.outer][args.inner]
    except IndexError:
        raise UsageError(f"split has no outer fold {args.outer} / inner fold {args.inner}") from None
    data = _load_dataset(Path(args.data), [*train_ids, *val_ids])
    shape = next(iter(data.values()))[0].shape
    net_cfg = replace(net_cfg, input_shape=shape)

    def progress(row):
        _say(args, f"restart {row['restart']} epoch {row['epoch']:3d}  loss {row['loss']:.4f}  val dice {row['val_dice']:.4f}")

    ws, history = train.train(net_cfg, [data[s] for s in train_ids], run, val_set=[data[s] for s in val_ids],
                              progress=progress)
    meshnet.save_weights(ws, net_cfg, args.out)
    if args.history:
        train.write_history_csv(history, args.history)
    _say(args, f"best val dice {max(r['val_dice'] for r in history):.4f}; wrote {args.out}")
    return 0


def cmd_metrics(args):
    pred = nifti.read_label_mask(args.pred)
    gt = nifti.read_label_mask(args.gt)
    if pred.shape != gt.shape:
        raise DataError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    result = metrics.evaluate(pred, gt)
    if args.json:
        print(json.dumps(result))
    else:
        for k in ("dice", "avd", "mcc"):
            print(f"{k}: {result[k]:.6f}")
        print(f"tp: {result['tp']}  fp: {result['fp']}  fn: {result['fn']}  tn: {result['tn']}")
    return 0


def cmd_splits(args):
    records = evalkit.read_subjects_csv(args.subjects)
    plan = evalkit.make_splits(records, args.outer, args.inner, seed=args.seed or 0)
    Path(args.out).write_text(plan.to_json())
    _say(args, f"wrote {args.out}: {len(records)} subjects, {args.outer}x{args.inner} folds")
    return 0


def cmd_stats(args):
    table = evalkit.ScoreTable.from_csv(args.scores)
    rows = evalkit.compare_models(table, args.baseline, args.alpha, zero_method=args.zero_method)
    print(evalkit.format_table(rows))
    if args.out:
        Path(args.out).write_text(evalkit.rows_to_csv(rows))
    return 0


def cmd_hpo(args):
    space = hpo.SearchSpace.from_dict(json.loads(Path(args.space).read_text()))
    if args.synthetic:
        objective = hpo.synthetic_objective
    else:
        if not (args.data and args.split):
            raise UsageError("hpo needs --data and --split (or --synthetic)")
        plan = evalkit.SplitPlan.from_json(Path(args.split).read_text())
        ids = sorted({s for tr, va in plan.inner_folds[0] for s in (*tr, *va)})
        data = _load_dataset(Path(args.data), ids)
        base = train.load_train_config(args.config)[1] if args.config else train.TrainRunConfig()
        objective = hpo.make_cv_objective(data, plan, base)
    result = hpo.run_search(space, args.budget, min(args.workers, args.threads), args.seed or 0, objective,
                            eta=args.eta, ledger_path=args.out, resume=True)
    print(hpo.ledger_to_json(result))
    return 0


COMMANDS = {
    "describe": cmd_describe,
    "conform": cmd_conform,
    "infer": cmd_infer,
    "train": cmd_train,
    "metrics": cmd_metrics,
    "splits": cmd_splits,
    "stats": cmd_stats,
    "hpo": cmd_hpo,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"meshvox: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError, ValueError, KeyError, engine.BudgetTooSmallError) as exc:
        print(f"meshvox: error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
