"""Command-line entry point: ``tmpa <command> [flags]``."""

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ContractViolation
from .evalkit import MODES, embed, evaluate, format_table, metrics_row, write_embeddings_csv, write_metrics_csv
from .pedmix import expand_mask, mix_pair, partition_regions, sample_masks
from .synthdata import SynthSpec, generate, load_dataset, read_ppm, save_dataset, write_pgm, write_ppm
from .trainer import (
    Checkpoint,
    TrainConfig,
    TrainingDiverged,
    apply_overrides,
    format_config,
    load_config,
    train,
)

def _pair(text):
    key, sep, val = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), val.strip()


MODE_ALIASES = {"visible-to-infrared": "v2i", "infrared-to-visible": "i2v"}


def _mode(text):
    mode = MODE_ALIASES.get(text, text)
    if mode not in MODES:
        raise argparse.ArgumentTypeError(f"mode must be v2i or i2v, got {text!r}")
    return mode


def build_parser():
    parser = argparse.ArgumentParser(prog="tmpa", description="Desk-scale visible-infrared re-identification.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--set", dest="overrides", type=_pair, action="append", default=[],
                       metavar="KEY=VALUE", help="config override, repeatable")
        p.add_argument("--data", type=Path, help="dataset directory (default: generate the default dataset)")
        return p

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-ids", type=int, default=SynthSpec.num_ids)
    p.add_argument("--num-test-ids", type=int, default=SynthSpec.num_test_ids)
    p.add_argument("--imgs", type=int, default=SynthSpec.imgs_per_id_per_modality)
    p.add_argument("--noise-sigma", type=float, default=SynthSpec.noise_sigma)

    p = common(sub.add_parser("augment", help="mix one visible/infrared pair and dump images and masks"))
    p.add_argument("--visible", type=Path, help="visible P6 image")
    p.add_argument("--infrared", type=Path, help="infrared P6 image")
    p.add_argument("--identity", type=int, default=0, help="train identity when reading from a dataset")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = common(sub.add_parser("train", help="train and write checkpoints and loss logs"))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--data", type=Path, help="dataset directory (default: generate the default dataset)")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", type=_mode, action="append", metavar="{v2i,i2v}", help="default: both directions")
    p.add_argument("--out", type=Path, help="directory for metrics.csv and embeddings")

    p = sub.add_parser("gradcheck", help="finite-difference checks of every primitive and the full loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-end-to-end", action="store_true")

    p = common(sub.add_parser("sweep", help="train and evaluate across values of one config key"))
    p.add_argument("--key", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default=None, help="comma-separated training seeds (default: the config seed)")
    p.add_argument("--ladder", action="store_true",
                   help="for mix.a_c: set mix.a_s and mix.a_o to a_c+0.05 and a_c+0.10")
    p.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args):
    """Defaults, then the config file, then --seed and --set."""
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return apply_overrides(cfg, args.overrides)


def print_config(cfg):
    print("# resolved config")
    print(format_config(cfg), end="", flush=True)


def _dataset(args):
    return load_dataset(args.data) if args.data else generate()


def cmd_gen_data(args):
    spec = SynthSpec(num_ids=args.num_ids, num_test_ids=args.num_test_ids,
                     imgs_per_id_per_modality=args.imgs, seed=args.seed, noise_sigma=args.noise_sigma)
    for key, val in vars(spec).items():
        print(f"{key} = {val!r}")
    save_dataset(generate(spec), args.out)
    print(f"wrote {args.out}")


def cmd_augment(args):
    cfg = resolve_config(args)
    print_config(cfg)
    if args.visible or args.infrared:
        if not (args.visible and args.infrared):
            raise ContractViolation("--visible and --infrared must be given together")
        x_v, x_i = read_ppm(args.visible), read_ppm(args.infrared)
    else:
        ds = _dataset(args)
        if not 0 <= args.identity < ds.spec.num_ids:
            raise ContractViolation(f"identity {args.identity} not in the training split")
        x_v, x_i = ds.train_v[args.identity, args.index], ds.train_i[args.identity, args.index]
    if x_v.shape != x_i.shape:
        raise ContractViolation(f"image sizes differ: {x_v.shape} vs {x_i.shape}")
    region_map = partition_regions(x_v.shape[1], x_v.shape[2], cfg.patch_size, cfg.phi1, cfg.phi2)
    rng = np.random.default_rng([cfg.seed, 3])
    mask_v = sample_masks(region_map, cfg.mix, rng)
    mask_i = sample_masks(region_map, cfg.mix, rng)
    mixed_v, mixed_i = mix_pair(x_v, x_i, mask_v, mask_i)
    args.out.mkdir(parents=True, exist_ok=True)
    write_ppm(args.out / "mixed_visible.ppm", mixed_v)
    write_ppm(args.out / "mixed_infrared.ppm", mixed_i)
    write_pgm(args.out / "mask_visible.pgm", expand_mask(mask_v, cfg.patch_size).astype(float))
    write_pgm(args.out / "mask_infrared.pgm", expand_mask(mask_i, cfg.patch_size).astype(float))
    write_pgm(args.out / "regions.pgm", expand_mask(region_map.region_of, cfg.patch_size) / 2.0)
    print(f"region sizes C/S/O = {region_map.counts()}; wrote {args.out}")


def cmd_train(args):
    resume = Checkpoint.load(args.checkpoint) if args.checkpoint else None
    if resume is not None and not (args.config or args.overrides or args.seed is not None):
        cfg = resume.config
    else:
        cfg = resolve_config(args)
    print_config(cfg)
    ds = _dataset(args)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(format_config(cfg))
    start = time.time()
    ck = train(ds, cfg, out_dir=args.out, resume=resume, log_every=4)
    print(f"trained to epoch {ck.epoch} in {time.time() - start:.1f}s; checkpoints in {args.out}")


def cmd_eval(args):
    ck = Checkpoint.load(args.checkpoint)
    print_config(ck.config)
    ds = _dataset(args)
    modes = args.mode or ["v2i", "i2v"]
    metrics = [evaluate(ck, ds, m) for m in modes]
    print(format_table(metrics))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(args.out / "metrics.csv", metrics)
        for modality in ("visible", "infrared"):
            x, y = ds.split("test", modality)
            write_embeddings_csv(args.out / f"embeddings_{modality}.csv", embed(ck, x, modality, y))


def cmd_gradcheck(args):
    from .gradsuite import end_to_end_check, run_primitive_suite

    ok = True
    for name, report in run_primitive_suite(args.seed):
        print(f"{name:<22} {report}")
        ok &= report.passed
    if not args.skip_end_to_end:
        start = time.time()
        names, report = end_to_end_check(args.seed)
        print(f"{'L_total (micro-batch)':<22} {'PASS' if report.passed else 'FAIL'} max rel err "
              f"{report.worst:.3e} over {len(names)} parameter tensors ({time.time() - start:.1f}s)")
        ok &= report.passed
    print("all checks passed" if ok else "gradient check FAILED")
    return 0 if ok else 1


def sweep_grid(cfg, key, values, ladder=False):
    """Configs for a one-dimensional sweep over ``key``."""
    for text in values:
        pairs = [(key, text)]
        if ladder:
            if key != "mix.a_c":
                raise ContractViolation("--ladder only applies to mix.a_c")
            a_c = float(text)
            pairs += [("mix.a_s", repr(round(a_c + 0.05, 10))), ("mix.a_o", repr(round(a_c + 0.10, 10)))]
        yield text, apply_overrides(cfg, pairs)


def cmd_sweep(args):
    base = resolve_config(args)
    print_config(base)
    ds = _dataset(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "results.csv"
    with open(path, "w", newline="") as fh:
        writer = None
        for text, cfg in sweep_grid(base, args.key, values, args.ladder):
            for seed in seeds:
                run_cfg = replace(cfg, seed=seed)
                ck = train(ds, run_cfg)
                for mode in MODES:
                    row = {"key": args.key, "value": text, "seed": seed,
                           **metrics_row(evaluate(ck, ds, mode))}
                    if writer is None:
                        writer = csv.DictWriter(fh, fieldnames=list(row))
                        writer.writeheader()
                    writer.writerow(row)
                    fh.flush()
                    print(f"{args.key}={text} seed={seed} {mode} rank1={row['rank1']:.4f} map={row['map']:.4f}",
                          flush=True)
    print(f"wrote {path}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def _thread_limit():
    """Cap BLAS threads at TMPA_THREADS (default 1)."""
    raw = os.environ.get("TMPA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ContractViolation(f"TMPA_THREADS must be an integer, got {raw!r}") from None
    return threadpool_limits(limits=max(n, 1))


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return COMMANDS[args.command](args) or 0
    except (ContractViolation, TrainingDiverged) as exc:
        print(f"tmpa: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"tmpa: error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())
