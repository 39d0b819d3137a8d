"""Command line entry points.

Subcommands: phantom, mask, train, order-search, infer, eval. A flat JSON
config file can supply any long-option value (keys use underscores);
explicit flags win. PROVO_DEVICE selects the torch device unless --device
is given. Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from provo import data as dat
from provo import metrics as met
from provo.geometry import ProgressionOrder, Volume
from provo.kspace import generate_vd_mask
from provo.pipeline import (
    Pipeline,
    ReconstructionTask,
    SynthesisTask,
    default_device,
    order_search,
    prepare_recon_subject,
    prepare_synth_subject,
    train_pipeline,
)
from provo.seeds import derive_seed
from provo.training import LossWeights, TrainConfig


def _add_data_args(p):
    p.add_argument("--data", required=True, help="dataset directory with manifest.json")
    p.add_argument("--task", choices=["recon", "synth"], required=True)
    p.add_argument("--contrast", help="contrast to reconstruct (default: first in manifest)")
    p.add_argument("--R", type=float, help="acceleration factor (recon)")
    p.add_argument("--readout-axis", type=int, default=2, choices=[0, 1, 2])
    p.add_argument("--sources", nargs="+", help="source contrasts (synth)")
    p.add_argument("--target", help="target contrast (synth)")
    p.add_argument("--split", nargs=3, type=int, metavar=("TRAIN", "VAL", "TEST"),
                   help="subject counts per split (default: n-2 1 1)")
    p.add_argument("--seed", type=int, default=0)


def _add_train_args(p):
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--decay-start", type=int, default=None,
                   help="epoch the learning-rate decay begins (default: epochs / 2)")
    p.add_argument("--lambda-pix", type=float, default=100.0)
    p.add_argument("--n-c", type=int, default=1, help="neighboring slices per input")
    p.add_argument("--n-f", type=float, default=1.0, help="model width scale")
    p.add_argument("--device", default=None, help="torch device (default: PROVO_DEVICE or cpu)")


def build_parser():
    parser = argparse.ArgumentParser(prog="provo",
                                     description="progressive volumetric recovery")
    parser.add_argument("--config", help="flat JSON file of default option values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic multi-contrast dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--dims", nargs=3, type=int, default=[64, 64, 64])
    p.add_argument("--ellipsoids", type=int, default=8)
    p.add_argument("--smooth", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("mask", help="generate a variable-density sampling mask")
    p.add_argument("--shape", nargs=2, type=int, required=True)
    p.add_argument("--R", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="train a three-stage pipeline")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--order", default="ACS", help="progression order, e.g. ACS or A->C->S")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("order-search", help="train and score all progression orders")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_order_search)

    p = sub.add_parser("infer", help="run a trained pipeline on one subject")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--device", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="compare two volumes")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        with open(known.config) as f:
            values = json.load(f)
        if not isinstance(values, dict):
            raise dat.FormatError(f"{known.config}: config must be a flat JSON object")
        for action in parser._subparsers._group_actions[0].choices.values():
            for a in action._actions:
                if a.dest in values:
                    a.required = False
            action.set_defaults(**{k: v for k, v in values.items() if k in {a.dest for a in action._actions}})
    return parser.parse_args(argv)


def _parse_task(args, manifest):
    if args.task == "recon":
        if args.R is None:
            raise ValueError("--R is required for recon")
        contrast = args.contrast or manifest.contrast_names[0]
        return ReconstructionTask(R=args.R, readout_axis=args.readout_axis, contrast=contrast)
    if not args.sources or not args.target:
        raise ValueError("--sources and --target are required for synth")
    return SynthesisTask(sources=tuple(args.sources), target=args.target)


def _build_subjects(manifest, sids, task, seed):
    subjects = []
    for sid in sids:
        vols = manifest.load_subject(sid)
        if isinstance(task, ReconstructionTask):
            truth = vols[task.contrast]
            subjects.append(prepare_recon_subject(sid, truth, task,
                                                  derive_seed(seed, "mask", sid)))
        else:
            subjects.append(prepare_synth_subject(sid, vols, task))
    return subjects


def _split(args, manifest):
    n = len(manifest.sids)
    if args.split:
        n_train, n_val, n_test = args.split
    else:
        if n < 3:
            raise ValueError(f"dataset has {n} subjects; pass --split explicitly")
        n_train, n_val, n_test = n - 2, 1, 1
    return dat.split_subjects(manifest.sids, n_train, n_val, n_test,
                              seed=derive_seed(args.seed, "split"))


def _train_setup(args):
    manifest = dat.DatasetManifest.load(args.data)
    task = _parse_task(args, manifest)
    train_ids, val_ids, test_ids = _split(args, manifest)
    train_subjects = _build_subjects(manifest, train_ids, task, args.seed)
    val_subjects = _build_subjects(manifest, val_ids, task, args.seed)
    decay_start = args.decay_start if args.decay_start is not None else max(1, args.epochs // 2)
    cfg = TrainConfig(epochs=args.epochs, lr_base=args.lr, decay_start=decay_start)
    weights = LossWeights(lambda_pix=args.lambda_pix)
    device = args.device or default_device()
    resolved = {
        "task": args.task, "split": [len(train_ids), len(val_ids), len(test_ids)],
        "train_ids": train_ids, "val_ids": val_ids, "test_ids": test_ids,
        "epochs": args.epochs, "lr": args.lr, "decay_start": decay_start,
        "lambda_pix": args.lambda_pix, "n_c": args.n_c, "n_f": args.n_f,
        "seed": args.seed, "device": device,
    }
    return task, train_subjects, val_subjects, cfg, weights, device, resolved


def cmd_phantom(args) -> int:
    spec = dat.PhantomSpec(dims=tuple(args.dims), n_ellipsoids=args.ellipsoids,
                           smooth_sigma=args.smooth)
    manifest = dat.generate_phantom_dataset(args.out, args.subjects, spec, seed=args.seed)
    print(f"wrote {len(manifest.subjects)} subjects ({'x'.join(map(str, spec.dims))}) to {args.out}")
    return 0


def cmd_mask(args) -> int:
    mask = generate_vd_mask(tuple(args.shape), args.R, args.seed)
    dat.write_mask(args.out, mask)
    print(f"wrote {mask.shape[0]}x{mask.shape[1]} mask, R={args.R}, "
          f"realized rate {mask.rate:.4f} (target {1 / args.R:.4f})")
    return 0


def cmd_train(args) -> int:
    task, train_s, val_s, cfg, weights, device, resolved = _train_setup(args)
    order = ProgressionOrder.from_string(args.order)
    resolved["order"] = order.compact
    pipe = train_pipeline(task, train_s, val_s, order, cfg, n_c=args.n_c, n_f=args.n_f,
                          weights=weights, seed=args.seed, out_dir=args.out, device=device)
    pipe.settings["cli"] = resolved
    pipe.save(args.out)
    with open(Path(args.out) / "metrics.json", "w") as f:
        json.dump({"metrics": pipe.metrics, "settings": pipe.settings}, f,
                  indent=2, sort_keys=True)
    for i, v in enumerate(pipe.metrics["stage_val_psnr"], start=1):
        print(f"stage {i} ({order[i - 1].letter}): val psnr {v:.2f} dB")
    if "baseline_val_psnr" in pipe.metrics:
        print(f"zero-filled baseline: {pipe.metrics['baseline_val_psnr']:.2f} dB")
    return 0


def cmd_order_search(args) -> int:
    task, train_s, val_s, cfg, weights, device, resolved = _train_setup(args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    result = order_search(task, train_s, val_s, cfg, n_c=args.n_c, n_f=args.n_f,
                          weights=weights, seed=args.seed, parallel=args.parallel,
                          out_dir=args.out, device=device)
    print(result.report)
    print(f"best order: {result.best.label}")
    with open(Path(args.out) / "settings.json", "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
    return 0


def cmd_infer(args) -> int:
    pipe = Pipeline.load(args.model)
    manifest = dat.DatasetManifest.load(args.data)
    seed = pipe.settings.get("seed", 0)
    subjects = _build_subjects(manifest, [args.sid], pipe.task, seed)
    subject = subjects[0]
    est = pipe.infer(subject, device=args.device)
    mag = est.magnitude()
    if isinstance(pipe.task, ReconstructionTask):
        scale = subject.acquired.meta.get("norm_scale", 1.0)
    else:
        ref = subject.target if subject.target is not None else subject.sources[0]
        scale = ref.meta.get("norm_scale", 1.0)
    out = Volume(mag.data * scale, spacing=mag.spacing,
                 meta={"sid": args.sid, "norm_scale": float(scale), **mag.meta})
    dat.write_volume(args.out, out)
    line = f"wrote estimate for {args.sid} to {args.out}"
    truth = subject.truth if isinstance(pipe.task, ReconstructionTask) else subject.target
    if truth is not None:
        line += f" (val psnr {met.psnr(truth, mag):.2f} dB)"
    print(line)
    return 0


def cmd_eval(args) -> int:
    ref = dat.read_volume(args.ref)
    test = dat.read_volume(args.test)
    print(json.dumps({"psnr": met.psnr(ref, test), "ssim": met.ssim(ref, test)},
                     indent=2, sort_keys=True))
    return 0


def run(argv=None) -> int:
    parser = build_parser()
    args = _apply_config(parser, sys.argv[1:] if argv is None else list(argv))
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
