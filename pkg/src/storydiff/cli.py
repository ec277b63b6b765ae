"""Command-line entry point.

Subcommands: gen-data, train, sample, eval, bench. One JSON config file
is the source of truth; flags override file values and the resolved
config is written next to each command's outputs. Exit codes: 0 success,
1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .benchmark import CSV_HEADER, bench_attention, report_rows
from .data import (frame_to_u8, frames_to_float, generate_story, read_dataset,
                   write_dataset, write_ppm)
from .denoiser import init_params
from .errors import ConfigError, StorydiffError
from .evaluation import (background_consistency, feature_extract, fit_gaussian,
                         frechet_distance)
from .params import ParamStore
from .sampling import sample_story
from .schedule import make_cosine_schedule
from .seeding import derive_seed
from .training import run_training


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storydiff",
        description="Train and sample an autoregressive story-frame diffusion model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic story dataset")
    p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the root seed")
    p.add_argument("--count", type=int, default=2000, help="number of stories (default 2000)")
    p.add_argument("--out", required=True, help="output dataset path")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", required=True, help="dataset produced by gen-data")
    p.add_argument("--out-ckpt", required=True, help="checkpoint output path")
    p.add_argument("--adapter-only", action="store_true",
                   help="tune only the adapter (requires --base-ckpt)")
    p.add_argument("--base-ckpt", help="checkpoint to start from")
    p.add_argument("--seed", type=int, help="override the root seed")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="sample a story from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--captions-file", required=True,
                   help="JSON file with 'captions' (and 'first_frame' for continuation)")
    p.add_argument("--mode", choices=["visualization", "continuation"])
    p.add_argument("--lm", type=int, help="temporal window (overrides sample.window)")
    p.add_argument("--w", type=float, help="guidance scale (overrides sample.guidance)")
    p.add_argument("--seed", type=int, help="override the root seed")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", help="proxy metrics for a checkpoint against a dataset")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--n-stories", type=int, help="override eval.n_stories")
    p.add_argument("--seed", type=int, help="override the root seed")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="attention kernel benchmark")
    p.add_argument("--L", type=int, default=16, help="number of frame blocks")
    p.add_argument("--lm", type=int, default=2, help="window for the windowed mask")
    p.add_argument("--btok", type=int, default=8, help="tokens per block")
    p.add_argument("--d", type=int, default=64, help="head dimension")
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=_cmd_bench)
    return parser


def _resolved(args, overrides: dict):
    tree = cfgmod.load_config_tree(getattr(args, "config", None))
    tree = cfgmod.apply_overrides(tree, overrides)
    return tree, cfgmod.resolve(tree)


def _dump_next_to(tree: dict, out_path) -> None:
    out_path = Path(out_path)
    cfgmod.dump_resolved(tree, out_path.with_name(out_path.name + ".config.json"))


def _cmd_gen_data(args) -> int:
    tree, run = _resolved(args, {"seed": args.seed})
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    records = [
        generate_story(derive_seed(run.seed, "story", i), run.data, story_id=i)
        for i in range(args.count)
    ]
    write_dataset(records, args.out, run.data)
    _dump_next_to(tree, args.out)
    print(f"wrote {len(records)} stories to {args.out}")
    return 0


def _records_config_check(header: dict, run) -> None:
    if header["length"] != run.data.length or header["caption_len"] != run.data.caption_len:
        raise ConfigError(
            f"dataset has length={header['length']}, caption_len={header['caption_len']} "
            f"but the config says {run.data.length}/{run.data.caption_len}"
        )
    if len(header["vocab"]) > run.model.vocab_size:
        raise ConfigError(
            f"dataset vocabulary of {len(header['vocab'])} exceeds "
            f"model.vocab_size={run.model.vocab_size}"
        )
    if tuple(header["image_shape"]) != run.data.image_shape:
        raise ConfigError(
            f"dataset image shape {header['image_shape']} vs config {run.data.image_shape}"
        )


def _cmd_train(args) -> int:
    overrides = {"seed": args.seed, "train.steps": args.steps}
    if args.adapter_only:
        overrides["train.mode"] = "adapter_only"
    tree, run = _resolved(args, overrides)
    if args.adapter_only and not args.base_ckpt:
        raise ConfigError("--adapter-only requires --base-ckpt")
    header, records = read_dataset(args.data)
    _records_config_check(header, run)
    sched = make_cosine_schedule(run.schedule.timesteps, run.schedule.offset,
                                 run.schedule.variance)
    if args.base_ckpt:
        params, meta = ParamStore.load(args.base_ckpt)
        _validate_shapes(params, run)
    else:
        params = init_params(run.model, derive_seed(run.seed, "init"))
    out = Path(args.out_ckpt)
    run_training(records, params, sched, run.model, run.train, run.seed,
                 log_path=out.with_name(out.name + ".log.csv"),
                 progress=max(1, run.train.steps // 10))
    params.save(out, metadata={"config": tree})
    _dump_next_to(tree, out)
    print(f"saved checkpoint to {out}")
    return 0


def _validate_shapes(params: ParamStore, run) -> None:
    expected = init_params(run.model, 0)
    if sorted(expected.names()) != sorted(params.names()):
        raise ConfigError("checkpoint parameter names do not match the config")
    for name in expected.names():
        if expected[name].data.shape != params[name].data.shape:
            raise ConfigError(
                f"checkpoint entry {name} has shape {params[name].data.shape}, "
                f"config implies {expected[name].data.shape}"
            )


def _load_ckpt_run(ckpt_path, overrides):
    params, meta = ParamStore.load(ckpt_path)
    if "config" not in meta:
        raise ConfigError(f"checkpoint {ckpt_path} carries no config metadata")
    tree = cfgmod._merge(cfgmod.DEFAULTS, meta["config"], "")
    tree = cfgmod.apply_overrides(tree, overrides)
    run = cfgmod.resolve(tree)
    _validate_shapes(params, run)
    return params, tree, run


def _cmd_sample(args) -> int:
    overrides = {
        "seed": args.seed,
        "sample.window": args.lm,
        "sample.guidance": args.w,
        "sample.mode": args.mode,
    }
    params, tree, run = _load_ckpt_run(args.ckpt, overrides)
    spec_path = Path(args.captions_file)
    if not spec_path.is_file():
        raise ConfigError(f"captions file not found: {spec_path}")
    try:
        spec = json.loads(spec_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"captions file {spec_path}: invalid JSON ({exc})") from exc
    if "captions" not in spec:
        raise ConfigError(f"captions file {spec_path}: missing 'captions'")
    captions = [np.asarray(c, dtype=np.int64) for c in spec["captions"]]
    first_frame = None
    if "first_frame" in spec:
        first = np.asarray(spec["first_frame"], dtype=np.int64)
        if first.size != int(np.prod(run.data.image_shape)):
            raise ConfigError(
                f"first_frame has {first.size} values, expected "
                f"{int(np.prod(run.data.image_shape))}"
            )
        first_frame = frames_to_float(
            first.reshape(run.data.image_shape).astype(np.uint8)
        )
    sched = make_cosine_schedule(run.schedule.timesteps, run.schedule.offset,
                                 run.schedule.variance)
    frames = sample_story(captions, params, run.model, sched, run.sample,
                          run.seed, first_frame=first_frame)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(frames):
        name = f"frame_{i}.ppm"
        write_ppm(out_dir / name, frame_to_u8(frame))
        names.append(name)
    manifest = {
        "mode": run.sample.mode,
        "window": run.sample.window,
        "guidance": run.sample.guidance,
        "seed": run.seed,
        "frames": names,
        "captions": [c.tolist() for c in captions],
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    cfgmod.dump_resolved(tree, out_dir / "resolved_config.json")
    print(f"wrote {len(names)} frames to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    overrides = {"seed": args.seed, "eval.n_stories": args.n_stories}
    params, tree, run = _load_ckpt_run(args.ckpt, overrides)
    header, records = read_dataset(args.data)
    _records_config_check(header, run)
    sched = make_cosine_schedule(run.schedule.timesteps, run.schedule.offset,
                                 run.schedule.variance)
    n = min(run.eval.n_stories, len(records))
    rng = np.random.default_rng(derive_seed(run.seed, "eval-select"))
    chosen = [records[i] for i in rng.choice(len(records), size=n, replace=False)]

    real_frames, fake_frames, consistency = [], [], []
    scfg = run.sample
    for rec in chosen:
        frames = sample_story(
            [rec.captions[i] for i in range(run.data.length)],
            params, run.model, sched, scfg,
            derive_seed(run.seed, "eval-story", rec.story_id),
        )
        fake_frames.extend(frames)
        real_frames.extend(rec.frames_float())
        consistency.append(background_consistency(frames, rec.scene, run.data))

    feat_seed = derive_seed(run.seed, "features")
    real_stats = fit_gaussian(feature_extract(real_frames, feat_seed))
    fake_stats = fit_gaussian(feature_extract(fake_frames, feat_seed))
    proxy_fid = frechet_distance(real_stats, fake_stats)

    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["proxy_fid", "background_consistency", "n_stories", "seed"])
        writer.writerow([f"{proxy_fid:.10f}", f"{float(np.mean(consistency)):.10f}",
                         n, run.seed])
    _dump_next_to(tree, out)
    print(f"proxy_fid={proxy_fid:.4f} background_consistency={np.mean(consistency):.4f}")
    return 0


def _cmd_bench(args) -> int:
    reports = bench_attention(args.L, args.lm, args.btok, args.d, iters=args.iters)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        writer.writerows(report_rows(reports))
    for r in reports:
        print(f"{r.backend:6s} {r.mask:9s} flops={r.flops:>10d} median={r.median_s:.6f}s")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StorydiffError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
