"""Command-line entry point.

Subcommands: gen-data, pretrain, probe, fewshot, export-masks, bench.
Exit codes: 0 success, 2 numeric failure, 64 config/usage error, 66 missing
input file. Every run writes a JSON run manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import dataio, evaluate, geometry, trainer as trainer_mod
from .dataio import SHAPE_CLASSES
from .model import ConfigError as ModelConfigError, ParamStore, init_params
from .trainer import (ConfigError, NumericFailure, TrainConfig, Trainer,
                      config_text, parse_config, stream)

EXIT_OK = 0
EXIT_NUMERIC = 2
EXIT_CONFIG = 64
EXIT_MISSING = 66


class MissingInput(FileNotFoundError):
    pass


def _write_run_manifest(out_dir, command, cfg_text, seed, started, artifacts):
    manifest = {
        "command": command,
        "config": cfg_text,
        "config_hash": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "seed": seed,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": [os.path.abspath(a) for a in artifacts],
    }
    for a in artifacts:
        if not os.path.exists(a):
            raise RuntimeError(f"run manifest names missing artifact {a}")
    path = os.path.join(out_dir, "run_manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2)
    os.replace(tmp, path)
    return path


def _require(path, what):
    if not os.path.exists(path):
        raise MissingInput(f"{what} not found: {path}")
    return path


def _find_manifest(data):
    if os.path.isdir(data):
        data = os.path.join(data, "manifest.txt")
    return _require(data, "dataset manifest")


def _load_trainer_from_checkpoint(path):
    meta, _ = dataio.load_checkpoint(_require(path, "checkpoint"))
    cfg = parse_config_text(meta["config"])
    params = init_params(cfg.model_config(), stream(cfg.seed, "init"))
    _, arrays = dataio.load_checkpoint(path, select="student.")
    params.load_arrays({n[len("student."):]: a for n, a in arrays.items()},
                       strict=False)
    return cfg, params


def parse_config_text(text):
    import tempfile
    with tempfile.NamedTemporaryFile("w", suffix=".cfg", delete=False) as f:
        f.write(text)
        tmp = f.name
    try:
        return parse_config(tmp)
    finally:
        os.unlink(tmp)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    for c in classes:
        if c not in SHAPE_CLASSES:
            raise ConfigError(f"unknown shape class {c!r}; choose from {SHAPE_CLASSES}")
    os.makedirs(args.out, exist_ok=True)
    entries = []
    artifacts = []
    for label, cname in enumerate(classes):
        for i in range(args.per_class):
            rng = stream(args.seed, "gen", label, i)
            cloud = dataio.gen_synthetic(cname, args.points, args.noise, rng,
                                         orient=args.orient, deform=args.deform)
            rel = f"{cname}_{i:04d}.pcam"
            dataio.write_cloud(os.path.join(args.out, rel), cloud)
            artifacts.append(os.path.join(args.out, rel))
            # 70/10/20 split: floor(0.7n) train, floor(0.1n) val, rest test
            n = args.per_class
            n_train, n_val = int(0.7 * n), int(0.1 * n)
            split = ("train" if i < n_train
                     else "val" if i < n_train + n_val else "test")
            entries.append(dataio.ManifestEntry(rel, label, split))
    manifest = dataio.DatasetManifest(class_names=classes, entries=entries)
    mpath = os.path.join(args.out, "manifest.txt")
    dataio.write_manifest(mpath, manifest)
    artifacts.append(mpath)
    _write_run_manifest(args.out, "gen-data", f"classes={classes} "
                        f"per_class={args.per_class} points={args.points} "
                        f"noise={args.noise} orient={args.orient} "
                        f"deform={args.deform}",
                        args.seed, started, artifacts)
    print(f"wrote {len(entries)} clouds to {args.out}")
    return EXIT_OK


def cmd_pretrain(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    cfg = parse_config(_require(args.config, "config file"))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.masking:
        cfg.masking = args.masking
    if args.steps is not None:
        cfg.steps = args.steps
    cfg.validate()
    mpath = _find_manifest(args.data)
    clouds, _, _ = dataio.load_split(mpath, "train")
    if not clouds:
        raise MissingInput(f"no training clouds in {mpath}")
    os.makedirs(args.out, exist_ok=True)

    tr = Trainer(cfg, clouds, out_dir=args.out)
    start_step = 0
    if args.resume:
        tr.load(_require(args.resume, "resume checkpoint"))
        start_step = tr.step_count
    metrics = os.path.join(args.out, "metrics.csv")
    final = os.path.join(args.out, "final.ckpt")

    def progress(step, report):
        if args.verbose and step % 50 == 0:
            print(f"step {step}: enc={report.l_encoder_total:.4f} "
                  f"mask={report.l_mask_total:.4f}", flush=True)

    try:
        tr.run(metrics_path=metrics, checkpoint_dir=args.out,
               start_step=start_step, progress=progress)
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    tr.save(final)
    _write_run_manifest(args.out, "pretrain", config_text(cfg), cfg.seed,
                        started, [metrics, final])
    print(f"pretraining done: {final}")
    return EXIT_OK


def _probe_features(cfg, params, mpath, seed):
    train_clouds, ytr, names = dataio.load_split(mpath, "train")
    test_clouds, yte, _ = dataio.load_split(mpath, "test")
    ftr = evaluate.extract_features(train_clouds, params, cfg, seed=seed)
    fte = evaluate.extract_features(test_clouds, params, cfg, seed=seed)
    return ftr, ytr, fte, yte, names


def cmd_probe(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    cfg, params = _load_trainer_from_checkpoint(args.checkpoint)
    mpath = _find_manifest(args.data)
    os.makedirs(args.out, exist_ok=True)
    ftr, ytr, fte, yte, names = _probe_features(cfg, params, mpath, args.seed)
    res = evaluate.linear_probe(ftr, ytr, fte, yte, n_seeds=args.seeds)
    reports = [evaluate.format_probe_report("pretrained", res, names)]
    rows = [("pretrained", res.accuracy_mean, res.accuracy_std)]
    if args.compare_random:
        rand_params = init_params(cfg.model_config(), stream(args.seed, "randinit"))
        ftr_r, _, fte_r, _, _ = _probe_features(cfg, rand_params, mpath, args.seed)
        res_r = evaluate.linear_probe(ftr_r, ytr, fte_r, yte, n_seeds=args.seeds)
        reports.append(evaluate.format_probe_report("random-init", res_r, names))
        rows.append(("random_init", res_r.accuracy_mean, res_r.accuracy_std))
    report_path = os.path.join(args.out, "probe_report.txt")
    with open(report_path, "w") as f:
        f.write("\n\n".join(reports) + "\n")
    csv_path = os.path.join(args.out, "probe_results.csv")
    with open(csv_path, "w") as f:
        f.write("encoder,accuracy_mean,accuracy_std\n")
        for name, m, s in rows:
            f.write(f"{name},{m:.6f},{s:.6f}\n")
    _write_run_manifest(args.out, "probe", f"checkpoint={args.checkpoint} "
                        f"seeds={args.seeds}", args.seed, started,
                        [report_path, csv_path])
    print("\n\n".join(reports))
    return EXIT_OK


def cmd_fewshot(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    cfg, params = _load_trainer_from_checkpoint(args.checkpoint)
    mpath = _find_manifest(args.data)
    os.makedirs(args.out, exist_ok=True)
    clouds, labels, names = dataio.load_split(mpath, "train")
    feats = evaluate.extract_features(clouds, params, cfg, seed=args.seed)
    feats = evaluate.standardize(feats, feats)
    mean, std, per_fold, _ = evaluate.fewshot_eval(
        feats, labels, args.way, args.shot, n_folds=args.folds,
        query_per_class=args.query, seed=args.seed)
    csv_path = os.path.join(args.out, "fewshot_folds.csv")
    with open(csv_path, "w") as f:
        f.write("fold,accuracy\n")
        for i, a in enumerate(per_fold):
            f.write(f"{i},{a:.6f}\n")
    summary = os.path.join(args.out, "fewshot_summary.txt")
    with open(summary, "w") as f:
        f.write(f"{args.way}-way {args.shot}-shot over {args.folds} folds: "
                f"{mean:.4f} +/- {std:.4f}\n")
    _write_run_manifest(args.out, "fewshot", f"way={args.way} shot={args.shot} "
                        f"folds={args.folds}", args.seed, started,
                        [csv_path, summary])
    print(f"{args.way}-way {args.shot}-shot: {mean:.4f} +/- {std:.4f}")
    return EXIT_OK


def cmd_export_masks(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    cfg, params = _load_trainer_from_checkpoint(args.checkpoint)
    cloud, _ = dataio.read_cloud(_require(args.cloud, "input cloud"))
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    paths, _, _ = evaluate.export_masks(cloud, params, cfg, args.out,
                                        seed=args.seed)
    _write_run_manifest(out_dir, "export-masks", f"checkpoint={args.checkpoint}",
                        args.seed, started, paths)
    print("\n".join(paths))
    return EXIT_OK


def cmd_bench(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for n in (256, 1024, 2048):
        rng = stream(args.seed, "bench", n)
        clouds = [dataio.gen_synthetic("sphere", n, 0.02, rng) for _ in range(8)]
        p, k = 64, 32
        t0 = time.perf_counter()
        reps = 0
        while time.perf_counter() - t0 < 0.5:
            for c in clouds:
                geometry.patchify(c, p, k, seed=0)
            reps += len(clouds)
        rate = reps / (time.perf_counter() - t0)
        rows.append((n, rate))
    csv_path = os.path.join(args.out, "bench.csv")
    with open(csv_path, "w") as f:
        f.write("n_points,clouds_per_sec\n")
        for n, rate in rows:
            f.write(f"{n},{rate:.2f}\n")
    _write_run_manifest(args.out, "bench", "fps+knn throughput", args.seed,
                        started, [csv_path])
    for n, rate in rows:
        print(f"n={n}: {rate:.1f} clouds/sec (fps p=64 + knn k=32)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="admask",
                                description="Adversarial-masking self-distillation "
                                            "for 3D point clouds")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic PCAM dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--classes", default=",".join(SHAPE_CLASSES))
    g.add_argument("--points", type=int, default=1024)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--orient", action="store_true",
                   help="random per-cloud orientation")
    g.add_argument("--deform", type=float, default=1.0,
                   help="per-axis random scaling range (1.0 disables)")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("pretrain", help="run adversarial-masking pretraining")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--masking", choices=["adversarial", "random", "block"])
    t.add_argument("--steps", type=int, help="override config step count")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--deterministic", action="store_true",
                   help="force fully serial execution (always on; accepted "
                        "for interface stability)")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_pretrain)

    pr = sub.add_parser("probe", help="linear probe on frozen features")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--seeds", type=int, default=10)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--compare-random", action="store_true")
    pr.set_defaults(fn=cmd_probe)

    fs = sub.add_parser("fewshot", help="n-way m-shot evaluation")
    fs.add_argument("--checkpoint", required=True)
    fs.add_argument("--data", required=True)
    fs.add_argument("--out", required=True)
    fs.add_argument("--way", type=int, default=4)
    fs.add_argument("--shot", type=int, default=10)
    fs.add_argument("--folds", type=int, default=10)
    fs.add_argument("--query", type=int, default=20)
    fs.add_argument("--seed", type=int, default=0)
    fs.set_defaults(fn=cmd_fewshot)

    em = sub.add_parser("export-masks", help="write learned masks as PCAM files")
    em.add_argument("--checkpoint", required=True)
    em.add_argument("--cloud", required=True, help="input PCAM file")
    em.add_argument("--out", required=True, help="output path prefix")
    em.add_argument("--seed", type=int, default=0)
    em.set_defaults(fn=cmd_export_masks)

    b = sub.add_parser("bench", help="FPS/kNN throughput benchmark")
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    threads = os.environ.get("PCAM_THREADS")
    if threads:
        # cap BLAS workers; everything else is already serial
        os.environ.setdefault("OMP_NUM_THREADS", threads)
        os.environ.setdefault("OPENBLAS_NUM_THREADS", threads)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigError, ModelConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInput, dataio.FormatError) as e:
        print(f"missing or unreadable input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericFailure, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
