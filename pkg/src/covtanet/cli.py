"""Command-line entry point: ``covtanet <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric divergence.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from . import data as D
from .checkpoint import ParameterStore
from .errors import ConfigError, DataError, NumericError
from .gradcheck import CHECKS, format_report, grad_check
from .metrics import aggregate, format_table
from .trainer import (TrainConfig, evaluate, load_model, predict_volumes, seed_everything,
                      train_joint, train_segmentation)
from .visualize import overlay, write_ppm

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _config(args, phase):
    overrides = dict(phase=phase, seed=args.seed, max_steps=args.max_steps,
                     max_epochs=args.max_epochs, lr0=args.lr0, log_path=args.log)
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def cmd_synth(args):
    vols = D.synth_generate(args.out, args.seed, args.count, (args.slices, args.size, args.size), args.mix)
    counts = {k: sum(v.label_class == k for v in vols) for k in D.CLASSES}
    print(f"wrote {len(vols)} volumes to {args.out}: {counts}")


def cmd_train_seg(args):
    cfg = _config(args, "seg")
    volumes, _ = D.load_dataset(args.data, require_masks=True)
    result = train_segmentation(volumes, cfg)
    result.store.save(args.out)
    last = result.log.epochs()[-1]
    print(f"segmentation: {result.steps} steps, loss {last['loss']:.4f}, dice {last['dice']:.4f} -> {args.out}")


def cmd_train_joint(args):
    cfg = _config(args, "joint")
    volumes, _ = D.load_dataset(args.data)
    result = train_joint(volumes, ParameterStore.load(args.seg_ckpt), cfg)
    result.store.save(args.out)
    last = result.log.epochs()[-1]
    print(f"joint: {result.steps} steps, loss {last['loss']:.4f}, "
          f"accuracy {last['diagnosis_accuracy']:.3f}/{last['severity_accuracy']:.3f} -> {args.out}")


def _stored_config(store):
    return TrainConfig.from_dict(store.meta["train_config"])


def cmd_infer(args):
    seed_everything(args.seed)
    store = ParameterStore.load(args.ckpt)
    model = load_model(store)
    cfg = _stored_config(store)
    v = D.load_volume(args.volume)
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(D.prepare_slices(v.slices, cfg.window)[:, None]).to(dtype)
    with torch.no_grad():
        prob = model.segment(x).prob_mask[:, 0].numpy()
    mask = (prob > 0.5).astype(np.uint8)
    os.makedirs(args.out, exist_ok=True)
    prob.astype("<f4").tofile(os.path.join(args.out, "probMask.f32"))
    mask.tofile(os.path.join(args.out, "mask.u8"))
    images = x[:, 0].numpy()
    for i in range(len(mask)):
        truth = None if v.masks is None else v.masks[i]
        write_ppm(os.path.join(args.out, f"overlay_{i:03d}.ppm"), overlay(images[i], mask[i], truth))
    prediction = {"id": v.id, "pDiagnosis": None, "pSeverity": None}
    if model.classifier is not None:
        pd, ps = predict_volumes(model, [v], cfg)
        prediction.update(pDiagnosis=float(pd[0]), pSeverity=float(ps[0]))
    with open(os.path.join(args.out, "prediction.json"), "w", encoding="utf-8") as fh:
        json.dump(prediction, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(prediction, sort_keys=True))


def cmd_eval(args):
    seed_everything(args.seed)
    store = ParameterStore.load(args.ckpt)
    model = load_model(store)
    cfg = _stored_config(store)
    volumes, index_folds = D.load_dataset(args.data)
    folds = D.read_index(args.folds).get("folds") if args.folds else index_folds
    if not folds:
        # no stored partition: score the whole set as a single fold
        folds = [[v.id for v in volumes]]
    by_id = {v.id: v for v in volumes}
    try:
        reports = [evaluate(model, [by_id[i] for i in fold], cfg, fold=k) for k, fold in enumerate(folds)]
    except KeyError as e:
        raise DataError(f"fold lists unknown volume {e}")
    summary = aggregate(reports)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "eval")
    os.makedirs(out, exist_ok=True)
    for r in reports:
        r.write(os.path.join(out, f"fold{r.fold}.json"))
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    table = format_table(reports, summary)
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)


def cmd_gradcheck(args):
    seed_everything(args.seed)
    torch.use_deterministic_algorithms(False)
    report = grad_check(args.module, args.seed)
    print(format_report(report))
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


def build_parser():
    p = _Parser(prog="covtanet", description="Tri-level attention lesion segmentation and CT volume classification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    def training(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--config", help="flat key = value file of training options")
        sp.add_argument("--out", required=True, help="checkpoint to write")
        sp.add_argument("--max-steps", type=int)
        sp.add_argument("--max-epochs", type=int)
        sp.add_argument("--lr0", type=float)
        sp.add_argument("--log", help="JSON-lines training log")

    sp = add("synth", cmd_synth, "generate a synthetic CT dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=64)
    sp.add_argument("--mix", default="1:1:1", help="normal:mild:severe weights")
    sp.add_argument("--slices", type=int, default=8)
    sp.add_argument("--size", type=int, default=64)

    training(add("train-seg", cmd_train_seg, "phase 1: train TA-SegNet"))
    sp = add("train-joint", cmd_train_joint, "phase 2: train diagnosis and severity heads")
    training(sp)
    sp.add_argument("--seg-ckpt", required=True)

    sp = add("infer", cmd_infer, "segment and classify one volume")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--volume", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "score a checkpoint on every fold")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--folds", help="index.json holding the fold lists (default: the dataset's, else one fold)")
    sp.add_argument("--out", help="report directory (default: eval/ next to the checkpoint)")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient check")
    sp.add_argument("--module", required=True, choices=sorted(CHECKS))
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError(parser.format_usage() + "covtanet: error: a subcommand is required")
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or EXIT_OK
    except NumericError as e:
        print(f"covtanet: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"covtanet: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as e:
        print(f"covtanet: config error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
