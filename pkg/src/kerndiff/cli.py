"""Command-line entry point.

Subcommands: synth, pretrain, traindiff, infer, eval, bench, viz-latent.
Every command reads one YAML experiment config (`--config`), optionally
overridden with repeated `--set section.key=value` flags, and writes only
inside its output directory. Relative output directories are resolved under
$KERNDIFF_OUTPUT_ROOT when that variable is set. Validation failures exit
with code 2 and a single `ERROR:<CODE>: message` line on stderr.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import cv2
import numpy as np

from . import data as datamod
from .config import apply_overrides, load_config, save_config
from .errors import CheckpointError, DataError, KerndiffError
from .inference import run_inference, to_uint8_rgb
from .metrics import MetricsReport
from .training import (TrainState, load_checkpoint, run_stage1, run_stage2,
                       save_checkpoint)


def _out_dir(cfg):
    root = os.environ.get("KERNDIFF_OUTPUT_ROOT", "")
    path = Path(cfg.output_dir)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _setup(args):
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, args.set or [])
    out = _out_dir(cfg)
    save_config(cfg, out / "config_resolved.yaml")
    return cfg, out


def cmd_synth(args):
    cfg, out = _setup(args)
    root = Path(cfg.data.root)
    splits = {"train": cfg.data.train_samples, "test": cfg.data.test_samples}
    for split, count in splits.items():
        if (root / f"{split}.npz").exists() and not args.overwrite:
            raise DataError(f"{root / (split + '.npz')} exists; pass --overwrite to replace it")
    d = cfg.data
    for i, (split, count) in enumerate(splits.items()):
        triplets = datamod.synth_triplets(d.synth_seed + 10_000 * i, count,
                                          d.height, d.width, d.bands, d.ratio)
        manifest = datamod.save_split(root, split, triplets, divisor=d.divisor)
        print(f"wrote {split}: {manifest['count']} triplets "
              f"{manifest['patch_size']}x{manifest['bands']} under {root}")
    return 0


def cmd_pretrain(args):
    cfg, out = _setup(args)
    dataset = datamod.load_split(cfg.data.root, "train")
    ckpt = out / "stage1.pt"
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt, cfg)
        if state.stage != "stage1":
            raise CheckpointError(f"{ckpt} is a {state.stage} checkpoint, cannot resume stage 1")
    else:
        state = TrainState.create(cfg)
    state.setup_stage1()
    losses = run_stage1(state, dataset, log_path=out / "stage1_log.csv")
    save_checkpoint(state, ckpt)
    if losses:
        print(f"stage1: {state.iteration} iterations, "
              f"loss {losses[0]:.6f} -> {losses[-1]:.6f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_traindiff(args):
    cfg, out = _setup(args)
    if args.separate:
        cfg = apply_overrides(cfg, ["stage2.separate=true"])
    dataset = datamod.load_split(cfg.data.root, "train")
    stage1_ckpt = Path(args.stage1 or (out / "stage1.pt"))
    ckpt = out / ("stage2_separate.pt" if cfg.stage2.separate else "stage2.pt")
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt, cfg)
        if state.stage != "stage2":
            raise CheckpointError(f"{ckpt} is a {state.stage} checkpoint, cannot resume stage 2")
    else:
        if not stage1_ckpt.exists():
            raise CheckpointError(
                f"stage-2 training needs the stage-1 checkpoint {stage1_ckpt}; run pretrain first")
        state = load_checkpoint(stage1_ckpt, cfg)
    state.setup_stage2()
    name = "stage2_separate_log.csv" if cfg.stage2.separate else "stage2_log.csv"
    rows = run_stage2(state, dataset, log_path=out / name)
    save_checkpoint(state, ckpt)
    if rows:
        print(f"stage2: {state.iteration} iterations, l_s2 {rows[0][2]:.6f} -> {rows[-1][2]:.6f}")
    print(f"checkpoint: {ckpt}")
    return 0


def _load_pair(cfg, args):
    if args.input:
        with np.load(args.input) as blob:
            if "pan" not in blob.files or "lrms" not in blob.files:
                raise DataError(f"{args.input} must contain 'pan' and 'lrms' arrays")
            return [(Path(args.input).stem, blob["pan"], blob["lrms"])]
    dataset = datamod.load_split(cfg.data.root, args.split)
    if args.all:
        idx = range(len(dataset))
    else:
        idx = [args.index]
        if args.index < 0 or args.index >= len(dataset):
            raise DataError(f"index {args.index} out of range for split of {len(dataset)}")
    return [(f"{i:03d}", dataset.pan[i], dataset.lrms[i]) for i in idx]


def cmd_infer(args):
    cfg, out = _setup(args)
    state = load_checkpoint(args.checkpoint, cfg)
    infer_dir = out / "fused"
    infer_dir.mkdir(exist_ok=True)
    timings = []
    for tag, pan, lrms in _load_pair(cfg, args):
        res = run_inference(state, pan, lrms, steps=args.steps, seed=cfg.seed)
        np.save(infer_dir / f"fused_{tag}.npy", res.fused.astype(np.float32))
        cv2.imwrite(str(infer_dir / f"fused_{tag}.png"), to_uint8_rgb(res.fused)[..., ::-1])
        timings.append({
            "sample": tag,
            "encode_s": res.encode_time,
            "sampling_s": res.sampling_time,
            "fusion_s": res.fusion_time,
            "denoiser_calls": res.denoiser_calls,
            "backbone_calls": res.backbone_calls,
            "latent_shape": list(res.latent.shape),
            "output_shape": list(res.fused.shape),
        })
        print(f"fused {tag}: sampling {res.sampling_time * 1e3:.1f} ms "
              f"({res.denoiser_calls} denoiser calls), fusion {res.fusion_time * 1e3:.1f} ms")
    with open(infer_dir / "timing.json", "w") as fh:
        json.dump(timings, fh, indent=2)
    return 0


def cmd_eval(args):
    cfg, out = _setup(args)
    dataset = datamod.load_split(cfg.data.root, args.split)
    fused_dir = Path(args.fused_dir)
    files = sorted(fused_dir.glob("fused_*.npy"))
    if not files:
        raise DataError(f"no fused_*.npy files under {fused_dir}")
    if len(files) != len(dataset):
        raise DataError(f"{len(files)} fused files vs {len(dataset)} reference samples")
    report = MetricsReport(ratio=cfg.metrics.ratio)
    for i, path in enumerate(files):
        fused = np.load(path)
        if fused.shape != dataset.lrms[i].shape:
            raise DataError(f"{path.name} shape {fused.shape} does not match sample {i}")
        report.add_sample(fused, dataset[i], block=cfg.metrics.q_block)
    report.save(out / "metrics.json", out / "metrics.txt")
    print(report.to_text())
    return 0


def cmd_bench(args):
    cfg, out = _setup(args)
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint, cfg)
    else:
        state = TrainState.create(cfg)  # timing only; fresh weights
        state.setup_stage2()
    sizes = [int(s) for s in args.sizes.split(",")]
    results = []
    for size in sizes:
        rng = np.random.default_rng(0)
        pan = rng.random((size, size, 1), dtype=np.float32)
        lrms = rng.random((size, size, cfg.data.bands), dtype=np.float32)
        run_inference(state, pan, lrms, steps=args.steps, seed=cfg.seed)  # warmup
        reps = []
        for _ in range(args.repeats):
            res = run_inference(state, pan, lrms, steps=args.steps, seed=cfg.seed)
            reps.append(res)
        results.append({
            "size": size,
            "sampling_s": min(r.sampling_time for r in reps),
            "fusion_s": min(r.fusion_time for r in reps),
            "encode_s": min(r.encode_time for r in reps),
            "denoiser_calls": reps[0].denoiser_calls,
            "backbone_calls": reps[0].backbone_calls,
        })
        print(f"{size}x{size}: sampling {results[-1]['sampling_s'] * 1e3:.1f} ms, "
              f"fusion {results[-1]['fusion_s'] * 1e3:.1f} ms")
    summary = {"runs": results}
    if len(results) >= 2:
        summary["sampling_ratio_last_vs_first"] = (
            results[-1]["sampling_s"] / results[0]["sampling_s"])
    with open(out / "bench.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return 0


def cmd_viz_latent(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg, out = _setup(args)
    state = load_checkpoint(args.checkpoint, cfg)
    dataset = datamod.load_split(cfg.data.root, args.split)
    indices = [int(i) for i in args.indices.split(",")]
    latents = []
    for i in indices:
        res = run_inference(state, dataset.pan[i], dataset.lrms[i], seed=cfg.seed)
        latents.append(res.latent)

    stacked = np.concatenate(latents, axis=0)
    centered = stacked - stacked.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:2]
    # deterministic sign: largest-magnitude loading positive
    for k in range(2):
        j = np.argmax(np.abs(basis[k]))
        if basis[k, j] < 0:
            basis[k] = -basis[k]

    viz_dir = out / "latents"
    viz_dir.mkdir(exist_ok=True)
    for i, lat in zip(indices, latents):
        coords = (lat - stacked.mean(axis=0)) @ basis.T
        np.save(viz_dir / f"latent_{i:03d}.npy", coords)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(coords[:, 0], coords[:, 1], s=36)
        ax.set_title(f"scene {i}")
        ax.set_xlabel("component 1")
        ax.set_ylabel("component 2")
        fig.tight_layout()
        fig.savefig(viz_dir / f"latent_{i:03d}.png", dpi=120)
        plt.close(fig)
        print(f"scene {i}: wrote latent_{i:03d}.png")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="kerndiff",
                                     description="Diffusion-modulated pansharpening toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted path)")

    p = sub.add_parser("synth", help="generate a synthetic triplet dataset")
    common(p)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="stage-1 training of encoder + backbone")
    common(p)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("traindiff", help="stage-2 training of the latent diffusion model")
    common(p)
    p.add_argument("--stage1", help="path to the stage-1 checkpoint (default <out>/stage1.pt)")
    p.add_argument("--separate", action="store_true",
                   help="ablation: train the denoiser alone with the backbone frozen")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_traindiff)

    p = sub.add_parser("infer", help="fuse PAN/LRMS pairs with a trained model")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--all", action="store_true", help="fuse every sample in the split")
    p.add_argument("--input", help="standalone .npz with 'pan' and 'lrms' arrays")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score fused outputs against a reference split")
    common(p)
    p.add_argument("--fused-dir", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure the inference cost structure")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--sizes", default="64,256")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("viz-latent", help="2D scatter plots of sampled latents per scene")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--indices", default="0")
    p.set_defaults(func=cmd_viz_latent)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KerndiffError as exc:
        print(f"ERROR:{exc.code}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
