"""Command-line pipeline: prepare, train, fit, generate, compare.

Every command writes under ``--out`` and records its settings in
``manifest.json`` there. Manifests hold no timestamps, so rerunning a
command with the same arguments reproduces every file byte for byte.
Wall times go to stderr only.

Exit codes: 0 success, 2 usage or input error, 3 shape mismatch,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .autoencoder import AeConfig, ModelFormatError, encode_all, decode, load_model, save_model, train
from .dataset import (IdxFormatError, PoisonPlan, TriggerSpec, inject_trigger, load_idx, save_idx,
                      synth_digits, trigger_mask)
from .metrics import (GridSpec, MonteCarloSpec, entropy, fingerprint_score, kl_divergence,
                      latent_grid, pairwise_density_export)
from .numerics import DomainError, NumericError, ShapeError, make_rng
from .vine import FitError, LatentDensity, VineFormatError, fit_dvine, load_vine, save_vine

log = logging.getLogger("vcae")

EXIT_OK, EXIT_USAGE, EXIT_SHAPE, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_FIT_ROWS = 5000


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------
# helpers


def _require_file(flag, path):
    if path is None:
        raise UsageError(f"{flag} is required")
    if not os.path.isfile(path):
        raise UsageError(f"{flag}: no such file: {path}")
    return path


def _load_data(args, flag="--data"):
    _require_file(flag, args.data)
    _require_file("--labels", args.labels)
    return load_idx(args.data, args.labels)


def _trigger(args):
    return TriggerSpec(height=args.trigger_h, width=args.trigger_w,
                       margin_bottom=args.trigger_margin, margin_right=args.trigger_margin,
                       intensity=args.trigger_intensity)


def _update_manifest(out, section, record):
    path = os.path.join(out, "manifest.json")
    manifest = {"tool": "vcae", "version": __version__, "commands": {}}
    if os.path.exists(path):
        with open(path) as fh:
            manifest = json.load(fh)
    manifest["commands"][section] = record
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------------
# commands


def cmd_prepare(args):
    if args.synthetic:
        clean = synth_digits(args.per_class, classes=args.classes, seed=args.seed)
        source = {"synthetic": True, "classes": args.classes, "per_class": args.per_class}
    else:
        if args.data is None:
            raise UsageError("--data is required unless --synthetic is given")
        clean = _load_data(args)
        source = {"synthetic": False, "data": os.path.abspath(args.data),
                  "labels": os.path.abspath(args.labels)}
    plan = PoisonPlan(target_class=args.target, fraction=args.fraction, trigger=_trigger(args))
    poisoned = inject_trigger(clean, plan, seed=args.seed)
    files = {}
    for name, data in (("clean", clean), ("poisoned", poisoned)):
        img = os.path.join(args.out, f"{name}-images.idx")
        lbl = os.path.join(args.out, f"{name}-labels.idx")
        save_idx(data, img, lbl)
        files[name] = {"images": os.path.basename(img), "labels": os.path.basename(lbl),
                       "sha256": _sha(img)}
    _update_manifest(args.out, "prepare", {
        "source": source, "seed": args.seed, "files": files,
        "poison": {"target": plan.target_class, "fraction": plan.fraction,
                   "trigger": asdict(plan.trigger),
                   "attacked": int(len(poisoned.attacked))},
    })
    print(f"wrote {len(clean)} clean and {len(poisoned.attacked)} poisoned images to {args.out}")


def cmd_train(args):
    data = _load_data(args)
    config = AeConfig(m=args.m, p=args.p, n=args.n, epochs=args.epochs, learning_rate=args.lr,
                      batch_size=args.batch, seed=args.seed)
    if data.m != config.m:
        raise ShapeError(f"--m is {config.m} but the images have {data.m} pixels")
    model, report = train(data, config)
    model_path = os.path.join(args.out, f"{args.name}.model")
    save_model(model, model_path)
    loss_path = os.path.join(args.out, f"{args.name}-loss.csv")
    with open(loss_path, "w", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(report.epoch_losses, start=1):
            fh.write(f"{i},{loss!r}\n")
    _update_manifest(args.out, f"train:{args.name}", {
        "data": os.path.abspath(args.data), "config": asdict(config),
        "model": os.path.basename(model_path), "model_sha256": _sha(model_path),
        "final_loss": report.final_loss if report.epoch_losses else None,
    })
    print(f"epochs={config.epochs} final_loss={report.final_loss:.6g} -> {model_path}")
    log.info("training wall time %.2fs", report.wall_time)


def cmd_fit(args):
    model = load_model(_require_file("--model", args.model))
    data = _load_data(args)
    if data.m != model.config.m:
        raise ShapeError(f"model expects {model.config.m} pixels, data has {data.m}")
    h = encode_all(model, data)
    rows = len(h)
    if not args.all_rows and rows > args.fit_rows:
        idx = np.sort(make_rng(args.seed).choice(rows, size=args.fit_rows, replace=False))
        h = h[idx]
    strategy = "greedy_tau" if args.order == "greedy" else "identity"
    vine = fit_dvine(h, order_strategy=strategy)
    vine_path = os.path.join(args.out, f"{args.name}.vine")
    save_vine(vine, vine_path)
    record = {"model": os.path.abspath(args.model), "data": os.path.abspath(args.data),
              "rows_used": int(len(h)), "rows_available": int(rows), "seed": args.seed,
              "order": args.order, "vine": os.path.basename(vine_path), "vine_sha256": _sha(vine_path)}
    if args.pairs_k > 0:
        pair_dir = os.path.join(args.out, f"{args.name}-pairs")
        files = pairwise_density_export(vine, args.pairs_k, pair_dir, seed=args.seed)
        record["pairs"] = {"dir": os.path.basename(pair_dir), "k": args.pairs_k, "files": len(files)}
    _update_manifest(args.out, f"fit:{args.name}", record)
    print(vine.describe())
    print(f"-> {vine_path}")


def cmd_generate(args):
    model = load_model(_require_file("--model", args.model))
    vine = load_vine(_require_file("--vine", args.vine))
    if vine.dim != model.config.n:
        raise ShapeError(f"vine has {vine.dim} dimensions, model latent size is {model.config.n}")
    h = vine.sample(args.g, args.seed)
    decoded = decode(model, h) if args.g else np.empty((0, model.config.m))
    sample_path = os.path.join(args.out, f"{args.name}.npy")
    np.save(sample_path, decoded)
    side = int(round(np.sqrt(model.config.m)))
    report = {"g": args.g, "seed": args.seed, "samples": os.path.basename(sample_path),
              "fingerprint": None}
    if side * side == model.config.m and args.g:
        trig = _trigger(args)
        mask = trigger_mask((side, side), trig)
        fp = {"trigger": {"height": trig.height, "width": trig.width, "margin": args.trigger_margin},
              "decoded_mask_mean": float(decoded[:, mask].mean())}
        if args.data is not None:
            ref = _load_data(args)
            if ref.m != model.config.m:
                raise ShapeError(f"reference images have {ref.m} pixels, model expects {model.config.m}")
            fp["score"] = fingerprint_score(decoded, mask, ref.inputs)
            fp["reference"] = os.path.abspath(args.data)
        report["fingerprint"] = fp
    report_path = os.path.join(args.out, f"{args.name}-fingerprint.json")
    _write_json(report_path, report)
    _update_manifest(args.out, f"generate:{args.name}", {
        "model": os.path.abspath(args.model), "vine": os.path.abspath(args.vine),
        "g": args.g, "seed": args.seed, "samples_sha256": _sha(sample_path),
    })
    print(json.dumps(report["fingerprint"], sort_keys=True))


def _spec(args, densities, dims):
    if args.estimator == "mc":
        return MonteCarloSpec(samples=args.mc_samples, scale=args.scale or "latent")
    if (args.scale or "copula") == "latent":
        return latent_grid(densities, args.grid_k)
    return GridSpec(k=args.grid_k, dims=dims)


def cmd_compare(args):
    if len(args.vines) < 2:
        raise UsageError("compare needs at least two vine files")
    vines = [load_vine(_require_file("vine", p)) for p in args.vines]
    dims = {v.dim for v in vines}
    if len(dims) != 1:
        raise ShapeError(f"vines have different latent dimensions {sorted(dims)}")
    names = args.names.split(",") if args.names else [os.path.splitext(os.path.basename(p))[0]
                                                       for p in args.vines]
    if len(names) != len(vines):
        raise UsageError("--names must list one name per vine")
    dens = [LatentDensity(v) for v in vines]
    spec = _spec(args, dens, dims.pop())
    rows = []
    base = None
    for i, (name, d) in enumerate(zip(names, dens)):
        summary = entropy(d, spec, seed=args.seed)
        value = summary.normalized if summary.normalized is not None else summary.raw
        if base is None:
            base = value
        change = 0.0 if value == base else 100.0 * (value - base) / abs(base)
        row = {"name": name, "entropy": value, "entropy_raw": summary.raw,
               "change_percent": change, "estimator": summary.estimator}
        row["kl_from_reference"] = 0.0 if i == 0 else kl_divergence(dens[0], d, spec, seed=args.seed)
        rows.append(row)
    report = {"reference": names[0], "estimator": args.estimator, "scale": spec.scale,
              "grid_k": args.grid_k if args.estimator == "grid" else None,
              "mc_samples": args.mc_samples if args.estimator == "mc" else None,
              "seed": args.seed, "q_floor": 1e-12, "rows": rows}
    _write_json(os.path.join(args.out, "compare.json"), report)
    lines = [f"{'model':<28}{'entropy':>10}{'change':>10}{'KL(ref||model)':>16}"]
    for r in rows:
        lines.append(f"{r['name']:<28}{r['entropy']:>10.4f}{r['change_percent']:>9.2f}%"
                     f"{r['kl_from_reference']:>16.4f}")
    lines.append(f"estimator={args.estimator} scale={spec.scale} seed={args.seed}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "compare.txt"), "w") as fh:
        fh.write(text)
    _update_manifest(args.out, "compare", {"vines": [os.path.abspath(p) for p in args.vines],
                                           "names": names, "estimator": args.estimator,
                                           "scale": spec.scale, "grid_k": args.grid_k,
                                           "mc_samples": args.mc_samples, "seed": args.seed})
    sys.stdout.write(text)


# ----------------------------------------------------------------------
# parser


def _add_trigger(p):
    p.add_argument("--trigger-h", type=int, default=4, help="trigger height in pixels")
    p.add_argument("--trigger-w", type=int, default=6, help="trigger width in pixels")
    p.add_argument("--trigger-margin", type=int, default=2, help="gap to the bottom and right edges")
    p.add_argument("--trigger-intensity", type=float, default=1.0)


def build_parser():
    parser = argparse.ArgumentParser(prog="vcae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        if data:
            p.add_argument("--data", help="IDX image file")
            p.add_argument("--labels", help="IDX label file")

    p = sub.add_parser("prepare", help="build clean and poisoned IDX datasets")
    common(p)
    p.add_argument("--synthetic", action="store_true", help="use the built-in synthetic digits")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--fraction", type=float, default=1.0)
    _add_trigger(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the linear autoencoder")
    common(p)
    p.add_argument("--m", type=int, default=784)
    p.add_argument("--p", type=int, default=64)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--name", default="model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="fit a D-vine to encoded data")
    common(p)
    p.add_argument("--model", help="autoencoder model file")
    p.add_argument("--order", choices=["identity", "greedy"], default="identity")
    p.add_argument("--fit-rows", type=int, default=DEFAULT_FIT_ROWS)
    p.add_argument("--all-rows", action="store_true", help="fit on every encoded row")
    p.add_argument("--pairs-k", type=int, default=30, help="pairwise CSV grid size, 0 to skip")
    p.add_argument("--name", default="vine")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("generate", help="sample latents from a vine and decode them")
    common(p)
    p.add_argument("--model", help="autoencoder model file")
    p.add_argument("--vine", help="vine file")
    p.add_argument("--g", type=int, default=64, help="number of samples")
    p.add_argument("--name", default="samples")
    _add_trigger(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("compare", help="entropy and KL report across vines")
    common(p, data=False)
    p.add_argument("vines", nargs="+", help="vine files; the first is the reference")
    p.add_argument("--names", help="comma-separated row names")
    p.add_argument("--estimator", choices=["grid", "mc"], default="grid")
    p.add_argument("--grid-k", type=int, default=20)
    p.add_argument("--mc-samples", type=int, default=20_000)
    p.add_argument("--scale", choices=["copula", "latent"], default=None)
    p.set_defaults(func=cmd_compare)
    return parser


def _dispatch(args):
    os.makedirs(args.out, exist_ok=True)
    lock = FileLock(os.path.join(args.out, ".vcae.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise UsageError(f"--out {args.out} is in use by another vcae process") from None
    try:
        start = time.perf_counter()
        args.func(args)
        log.info("%s finished in %.2fs", args.command, time.perf_counter() - start)
    finally:
        lock.release()


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if getattr(args, "g", 0) < 0:
            raise UsageError("--g must be non-negative")
        _dispatch(args)
    except UsageError as exc:
        print(f"vcae {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ShapeError as exc:
        print(f"vcae {args.command}: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (NumericError, FitError) as exc:
        print(f"vcae {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IdxFormatError, ModelFormatError, VineFormatError, DomainError, ValueError, OSError) as exc:
        print(f"vcae {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
