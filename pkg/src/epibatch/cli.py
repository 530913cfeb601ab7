"""Command-line front end: synth, sample, ipe, audit, calibrate, train, eval, refine.

Every artifact-producing run writes a manifest (resolved config, seed, tool
version, input/output digests); `epibatch rerun --manifest m.json --out dir`
re-executes the recorded command and verifies the outputs digest-identically.
All randomness flows from --seed through named per-component streams.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import shutil
import struct
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .budget import ScheduleSpec, calibrate
from .corpus import SplitSpec, load_dataset, make_splits
from .formats import read_payload, write_payload
from .metrics import evaluate_pair
from .refine import RefineConfig, VERTEBRA_IDS, longitudinal_bounds, refine_masks
from .samplers import SamplerConfig, batch_record, dumps_record, exposure_audit, make_sampler
from .synth import PRESETS, generate
from .toytrain import resolve_protocol, train
from . import budget as budget_mod


class UsageError(Exception):
    """Bad flags or flag combinations; maps to exit code 2."""


def _sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _digest_tree(root):
    root = Path(root)
    if root.is_file():
        return {root.name: _sha256_file(root)}
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[path.relative_to(root).as_posix()] = _sha256_file(path)
    return out


def _write_manifest(out_dir, command, config, seed, inputs):
    out_dir = Path(out_dir)
    outputs = {
        rel: digest
        for rel, digest in _digest_tree(out_dir).items()
        if rel != "manifest.json"
    }
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": inputs,
        "outputs": outputs,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (out_dir / "manifest.json").write_text(text, "utf-8")
    return manifest


class _OutDir:
    """Create the output directory; remove whatever was created if the run fails."""

    def __init__(self, path, force=False):
        self.path = Path(path)
        self.force = force
        self.created = False

    def __enter__(self):
        if self.path.exists():
            if any(self.path.iterdir()) and not self.force:
                raise UsageError(f"output directory {self.path} is not empty (use --force)")
            if self.force:
                shutil.rmtree(self.path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.created = True
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and self.created:
            shutil.rmtree(self.path, ignore_errors=True)
        return False


def _config_dict(args, skip=("func", "command", "out", "force")):
    config = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        if isinstance(value, tuple):
            value = list(value)
        config[key] = value
    return config


def _parse_int_pair(text, flag):
    parts = text.split(",")
    if len(parts) != 2:
        raise UsageError(f"{flag} expects two comma-separated integers, got {text!r}")
    return int(parts[0]), int(parts[1])


def _sampler_config(args):
    return SamplerConfig(
        strategy=args.strategy,
        batch_size=args.batch_size,
        classes_per_episode=args.classes_per_episode,
        supports_per_class=args.supports_per_class,
        queries_per_class=args.queries_per_class,
        episodes_per_epoch=args.episodes_per_epoch,
        supervision_source=args.supervision_source,
        seed=args.seed,
    )


def _add_sampler_flags(parser):
    parser.add_argument("--strategy", required=True, choices=("random", "weighted", "episodic"))
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--classes-per-episode", type=int, default=2)
    parser.add_argument("--supports-per-class", type=int, default=3)
    parser.add_argument("--queries-per-class", type=int, default=3)
    parser.add_argument("--episodes-per-epoch", type=int, default=500)
    parser.add_argument("--supervision-source", choices=("queries", "supports"), default="queries")


def cmd_synth(args):
    preset = PRESETS.get(args.preset)
    if preset is None:
        raise UsageError(f"unknown preset {args.preset!r}; available: {sorted(PRESETS)}")
    image_size = _parse_int_pair(args.image_size, "--image-size")
    spec = preset(
        n_patients=args.patients,
        slices_per_patient=args.slices_per_patient,
        seed=args.seed,
        image_size=image_size,
    )
    with _OutDir(args.out, args.force) as out:
        generate(spec, out)
        _write_manifest(out, "synth", _config_dict(args), args.seed, inputs={})
    return 0


def cmd_sample(args):
    dataset = load_dataset(args.data, verify_payloads=False)
    sampler = make_sampler(dataset.table, _sampler_config(args))
    lines = []
    for i in range(args.iters):
        lines.append(dumps_record(batch_record(i, sampler.next_batch())))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, "utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_ipe(args):
    if (args.episodes is None) == (args.batch_size is None):
        raise UsageError("pass exactly one of --episodes or --batch-size (with --train-size)")
    if args.episodes is not None:
        value = budget_mod.iterations_per_epoch(1, episodes_per_epoch=args.episodes)
    else:
        if args.train_size is None:
            raise UsageError("--batch-size requires --train-size")
        value = budget_mod.iterations_per_epoch(args.train_size, batch_size=args.batch_size)
    sys.stdout.write(json.dumps({"iterations_per_epoch": value}) + "\n")
    return 0


def cmd_audit(args):
    dataset = load_dataset(args.data, verify_payloads=False)
    sampler = make_sampler(dataset.table, _sampler_config(args))
    rows = exposure_audit(sampler, args.epochs)
    if args.format == "json":
        text = "\n".join(json.dumps(r, separators=(",", ":")) for r in rows) + "\n"
    else:
        lines = ["epoch,class_id,target_count,presence_count"]
        lines += [
            f"{r['epoch']},{r['class_id']},{r['target_count']},{r['presence_count']}"
            for r in rows
        ]
        text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, "utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_calibrate(args):
    milestones = tuple(int(m) for m in args.milestones.split(","))
    spec = ScheduleSpec(
        base_lr=args.base_lr,
        milestones=milestones,
        gamma=args.gamma,
        patience_epochs=args.patience,
        max_epochs=args.max,
        iters_per_epoch=args.ref_ipe,
    )
    schedule = calibrate(spec, args.ref_ipe, args.target_ipe)
    sys.stdout.write(json.dumps(schedule.to_json(), indent=2) + "\n")
    return 0


def _write_params(path, params):
    data = struct.pack("<I", params.size) + np.asarray(params, dtype="<f4").tobytes()
    Path(path).write_bytes(data)


def cmd_train(args):
    dataset = load_dataset(args.data, verify_payloads=False)
    split_spec = SplitSpec(
        dev_fraction=args.dev_fraction,
        folds=args.folds,
        fold=args.fold,
        subsample_fraction=args.subsample,
        seed=args.seed,
    )
    splits = make_splits(dataset.table, split_spec)
    config = _sampler_config(args)
    if args.strategy == "episodic":
        ipe = args.episodes_per_epoch
    else:
        ipe = budget_mod.iterations_per_epoch(len(splits.train), batch_size=args.batch_size)
    protocol = resolve_protocol(
        args.protocol,
        ipe,
        base_lr=args.base_lr,
        milestones=tuple(int(m) for m in args.milestones.split(",")),
        gamma=args.gamma,
        patience_epochs=args.patience,
        max_epochs=args.max_epochs,
        eval_every=args.eval_every,
        reference_ipe=args.reference_ipe,
    )
    with _OutDir(args.out, args.force) as out:
        result = train(dataset, config, protocol, seed=args.seed, splits=splits)
        (out / "log.csv").write_text(result.log.to_csv(), "utf-8")
        schedule_doc = {
            "protocol": args.protocol,
            "schedule": result.schedule.to_json(),
            "iters_per_epoch": result.iters_per_epoch,
        }
        (out / "schedule.json").write_text(json.dumps(schedule_doc, indent=2, sort_keys=True) + "\n", "utf-8")
        _write_params(out / "params.bin", result.params)
        run_doc = {
            "stop_reason": result.stop_reason,
            "total_iterations": result.total_iterations,
            "epochs_run": result.epochs_run,
            "sampler": config.to_json(),
            "splits": result.splits.to_json(),
        }
        (out / "run.json").write_text(json.dumps(run_doc, indent=2, sort_keys=True) + "\n", "utf-8")
        _write_manifest(
            out, "train", _config_dict(args), args.seed,
            inputs={"data": _digest_tree(args.data)},
        )
    return 0


def _load_labelmaps(ref_root, pred_root):
    """Pair reference and prediction label payloads by slice.

    The reference directory must be a corpus dataset.  Predictions either form
    a dataset too (paired by slice id) or are bare payload files named like
    the reference label files.
    """
    ref = load_dataset(ref_root, verify_payloads=False)
    pred_root = Path(pred_root)
    pred_dataset = None
    if (pred_root / "dataset.json").is_file():
        pred_dataset = load_dataset(pred_root, verify_payloads=False)
    pairs = []
    for rec in ref.table.records:
        ref_labels = ref.volumes.labels(rec.slice_id)
        if pred_dataset is not None:
            pred_labels = pred_dataset.volumes.labels(rec.slice_id).data
        else:
            path = pred_root / rec.label_file
            if not path.is_file():
                raise FileNotFoundError(f"no prediction payload for slice {rec.slice_id}: {path}")
            pred_labels = read_payload(path)
        pairs.append((rec.slice_id, pred_labels, ref_labels.data, ref_labels.spacing))
    return ref.catalog, pairs


def cmd_eval(args):
    catalog, pairs = _load_labelmaps(args.ref, args.pred)
    per_class_dice = {c: [] for c in catalog.class_ids}
    per_class_hd = {c: [] for c in catalog.class_ids}
    excluded = {c: 0 for c in catalog.class_ids}
    for _, pred, ref, spacing in pairs:
        report = evaluate_pair(pred, ref, catalog, spacing=spacing, hd95_mode=args.hd95_mode)
        for cid, entry in report.per_class.items():
            present = bool((ref == cid).any() or (pred == cid).any())
            if not present:
                continue
            per_class_dice[cid].append(entry["dice"])
            if entry["hd95"] is None:
                excluded[cid] += 1
            else:
                per_class_hd[cid].append(entry["hd95"])

    rows = []
    for cid in catalog.class_ids:
        dice = float(np.mean(per_class_dice[cid])) if per_class_dice[cid] else None
        hd = float(np.mean(per_class_hd[cid])) if per_class_hd[cid] else None
        rows.append({
            "class": cid,
            "name": catalog.name_of(cid),
            "dice": dice,
            "hd95_mm": hd,
            "hd95_undefined_slices": excluded[cid],
        })
    dices = [r["dice"] for r in rows if r["dice"] is not None]
    hds = [r["hd95_mm"] for r in rows if r["hd95_mm"] is not None]
    average = {
        "class": "AVERAGE",
        "name": "",
        "dice": float(np.mean(dices)) if dices else None,
        "hd95_mm": float(np.mean(hds)) if hds else None,
        "hd95_undefined_slices": sum(excluded.values()),
    }
    conventions = {
        "hd95_mode": args.hd95_mode,
        "empty_masks": "both-empty dice 1.0 / hd95 0.0; one-empty dice 0.0 / hd95 undefined",
    }
    if args.format == "json":
        doc = {"rows": rows + [average], "conventions": conventions, "n_slices": len(pairs)}
        text = json.dumps(doc, indent=2) + "\n"
    else:
        def fmt(v):
            return "" if v is None else repr(v)

        lines = ["class,name,dice,hd95_mm"]
        for r in rows + [average]:
            lines.append(f"{r['class']},{r['name']},{fmt(r['dice'])},{fmt(r['hd95_mm'])}")
        text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, "utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_refine(args):
    image = read_payload(args.image).astype(np.float64)
    masks_dir = Path(args.masks)
    if not masks_dir.is_dir():
        raise UsageError(f"--masks {masks_dir} is not a directory")
    masks = {}
    vertebrae = None
    for path in sorted(masks_dir.glob("*.seg")):
        name = path.stem
        payload = read_payload(path)
        if name == "vertebrae":
            vertebrae = payload
        else:
            masks[name] = payload.astype(bool)
    config = RefineConfig()
    if args.config:
        config = RefineConfig.from_json(json.loads(Path(args.config).read_text("utf-8")))

    crop_bounds = None
    if vertebrae is not None:
        lo, hi = longitudinal_bounds(vertebrae, args.top, args.bottom)
        crop_bounds = (lo, hi)
        image = image[lo : hi + 1]
        masks = {k: v[lo : hi + 1] for k, v in masks.items()}

    refined = refine_masks(image, masks, config)
    with _OutDir(args.out, args.force) as out:
        label_map = np.zeros(image.shape, dtype=np.uint8)
        classes = []
        for i, name in enumerate(sorted(refined), start=1):
            mask = refined[name]
            write_payload(out / f"{name}.seg", mask.astype(np.uint8))
            label_map[mask] = i
            classes.append({"id": i, "name": name, "voxels": int(mask.sum())})
        write_payload(out / "labelmap.seg", label_map)
        report = {
            "classes": classes,
            "config": config.to_json(),
            "crop": list(crop_bounds) if crop_bounds else None,
        }
        (out / "refine_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", "utf-8")
        inputs = {"image": _digest_tree(args.image), "masks": _digest_tree(args.masks)}
        if args.config:
            inputs["config"] = _digest_tree(args.config)
        _write_manifest(out, "refine", _config_dict(args), 0, inputs=inputs)
    return 0


def cmd_rerun(args):
    manifest = json.loads(Path(args.manifest).read_text("utf-8"))
    command = manifest["command"]
    runner = _RERUNNABLE.get(command)
    if runner is None:
        raise UsageError(f"manifest command {command!r} is not rerunnable")
    config = dict(manifest["config"])
    config["out"] = args.out
    config["force"] = args.force
    ns = argparse.Namespace(**config)
    code = runner(ns)
    if code != 0:
        return code
    produced = {
        rel: digest
        for rel, digest in _digest_tree(args.out).items()
        if rel != "manifest.json"
    }
    expected = manifest["outputs"]
    mismatches = sorted(
        set(expected) ^ set(produced)
    ) + sorted(k for k in set(expected) & set(produced) if expected[k] != produced[k])
    if mismatches:
        sys.stderr.write("rerun DIVERGED on: " + ", ".join(mismatches) + "\n")
        return 1
    sys.stdout.write(f"rerun reproduced {len(produced)} artifacts byte-identically\n")
    return 0


_RERUNNABLE = {"synth": cmd_synth, "train": cmd_train, "refine": cmd_refine}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="epibatch",
        description="Class-structured batch sampling, budget calibration, and desk-scale training tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--preset", default="paperlike")
    p.add_argument("--patients", type=int, default=40)
    p.add_argument("--slices-per-patient", type=int, default=20)
    p.add_argument("--image-size", default="32,32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample", help="emit a JSON-lines batch stream")
    p.add_argument("--data", required=True)
    _add_sampler_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("ipe", help="iterations per epoch for a strategy shape")
    p.add_argument("--train-size", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_ipe)

    p = sub.add_parser("audit", help="per-epoch class exposure counts")
    p.add_argument("--data", required=True)
    _add_sampler_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("calibrate", help="re-express an epoch schedule in target epochs")
    p.add_argument("--milestones", default="30,45")
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--max", type=int, default=200)
    p.add_argument("--ref-ipe", type=int, required=True)
    p.add_argument("--target-ipe", type=int, required=True)
    p.add_argument("--base-lr", type=float, default=1e-4)
    p.add_argument("--gamma", type=float, default=0.1)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="run one training protocol")
    p.add_argument("--data", required=True)
    _add_sampler_flags(p)
    p.add_argument("--protocol", default="epoch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-lr", type=float, default=1e-4)
    p.add_argument("--milestones", default="30,45")
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--reference-ipe", type=int, default=500)
    p.add_argument("--dev-fraction", type=float, default=0.85)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--subsample", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class Dice/HD95 of predictions vs reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--hd95-mode", choices=("union", "max"), default="union")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("refine", help="refine raw anatomical masks into tissue classes")
    p.add_argument("--image", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--config")
    p.add_argument("--top", default="T1", choices=sorted(VERTEBRA_IDS))
    p.add_argument("--bottom", default="L4", choices=sorted(VERTEBRA_IDS))
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("rerun", help="re-execute a manifest and verify digests")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_rerun)

    return parser


def _thread_limiter():
    value = os.environ.get("EPIBATCH_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=int(value))


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        with _thread_limiter():
            return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"epibatch: {exc}\n")
        return 2
    except (ValueError, OSError, KeyError) as exc:
        sys.stderr.write(f"epibatch: {type(exc).__name__}: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
