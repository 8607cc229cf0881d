"""Command-line front end.

Subcommands:
  synth        write synthetic moving-shape clips plus labels and a preview
  train        fit the network on clip/label pairs; log, curve, weights
  segment      run a trained network over a clip; mask, overlay, summary
  cost-report  closed-form work/parameter/memory tables and figure
  bench        timed forward passes with measured multiply-adds

Every command takes --config (a JSON file path or a bundled name such as
"toy64" or "ref320"), --seed, --out, and --variant, and writes figures
alongside its delimited output.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import costmodel, counting, io, network, report, synth, training
from .errors import ConfigError, ShapeError
from .tensor import ClipTensor

VARIANTS = ("standard", "r2plus1d", "separable")


# ---------------------------------------------------------------------------
# shared plumbing


def _resolve_config(text: str) -> Path:
    path = Path(text)
    if path.is_file():
        return path
    if text.endswith(".json"):
        raise ConfigError(f"config file {text} does not exist")
    return network.bundled_config_path(text)


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ConfigError(f"dims must look like HEIGHTxWIDTHxFRAMES, got {text!r}")
    try:
        h, w, t = (int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"dims must be integers, got {text!r}") from exc
    if min(h, w, t) < 1:
        raise ConfigError(f"dims must be positive, got {text!r}")
    return h, w, t


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> tuple[network.NetworkConfig, network.TrainConfig | None]:
    return network.load_config(_resolve_config(args.config))


def _default_dims(args, train_cfg) -> tuple[int, int, int]:
    if args.dims is not None:
        return _parse_dims(args.dims)
    if train_cfg is not None:
        return (train_cfg.crop, train_cfg.crop, train_cfg.clip_length)
    raise ConfigError("config has no training section; pass --dims HxWxT")


def _labels_to_clip(labels: np.ndarray) -> ClipTensor:
    return ClipTensor(labels.astype(np.float64)[..., np.newaxis])


def _labels_from_clip(clip: ClipTensor, path: str) -> np.ndarray:
    arr = clip.data
    if arr.shape[-1] != 1:
        raise ShapeError(f"label file {path} must have one channel, has {arr.shape[-1]}")
    labels = np.rint(arr[..., 0]).astype(np.int64)
    if np.abs(arr[..., 0] - labels).max() > 1e-9 or labels.min() < 0:
        raise ConfigError(f"label file {path} holds non-label values")
    return labels


# ---------------------------------------------------------------------------
# synth


def _cmd_synth(args) -> int:
    out = _out_dir(args)
    h, w, t = _parse_dims(args.dims)
    spec = synth.SynthSpec(height=h, width=w, frames=t, noise=args.noise)
    data = synth.make_dataset(args.clips, spec, seed=args.seed)
    rows = []
    for i, (clip, labels) in enumerate(data):
        clip_path = out / f"clip_{i:02d}.clip"
        labels_path = out / f"clip_{i:02d}_labels.clip"
        io.write_clip(str(clip_path), clip)
        io.write_clip(str(labels_path), _labels_to_clip(labels))
        rows.append((clip_path.name, labels_path.name, labels.mean()))
    with open(out / "dataset.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip", "labels", "foreground_fraction"])
        for name, lname, frac in rows:
            writer.writerow([name, lname, f"{frac:.6f}"])
    report.write_clip_montage(data[0][0], data[0][1], out / "synth_preview.png",
                              title="synthetic clip 0")
    print(f"wrote {len(data)} clip/label pairs, dataset.csv, synth_preview.png to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _read_dataset(data_dir: Path) -> list[tuple[ClipTensor, np.ndarray]]:
    label_files = sorted(data_dir.glob("*_labels.clip"))
    if not label_files:
        raise ConfigError(f"no *_labels.clip files under {data_dir}")
    dataset = []
    for labels_path in label_files:
        clip_path = labels_path.with_name(
            labels_path.name.replace("_labels.clip", ".clip"))
        if not clip_path.is_file():
            raise ConfigError(f"missing clip file {clip_path} for {labels_path.name}")
        clip = io.read_clip(str(clip_path))
        labels = _labels_from_clip(io.read_clip(str(labels_path)), str(labels_path))
        dataset.append((clip, labels))
    return dataset


def _cmd_train(args) -> int:
    out = _out_dir(args)
    cfg, tcfg = _load(args)
    if tcfg is None:
        raise ConfigError("config has no training section; cannot train")
    if args.epochs is not None:
        tcfg = network.TrainConfig(
            learning_rate=tcfg.learning_rate, decay_rate=tcfg.decay_rate,
            decay_every=tcfg.decay_every, epochs=args.epochs,
            scale_jitter=tcfg.scale_jitter, horizontal_flip=tcfg.horizontal_flip,
            clip_length=tcfg.clip_length, crop=tcfg.crop)
    if args.data is not None:
        dataset = _read_dataset(Path(args.data))
    else:
        spec = synth.SynthSpec(height=tcfg.crop, width=tcfg.crop,
                               frames=tcfg.clip_length, channels=cfg.in_channels)
        dataset = synth.make_dataset(args.clips, spec, seed=args.seed)
    dims = (tcfg.crop, tcfg.crop, tcfg.clip_length)
    net = network.SegmentationNetwork(cfg, dims, seed=args.seed, variant=args.variant)

    def log(e: training.EpochStats) -> None:
        print(f"epoch {e.epoch:3d}  lr {e.learning_rate:.2e}  "
              f"train {e.train_loss:.4f}  eval {e.eval_loss:.4f}  "
              f"acc {e.accuracy:.4f}  iou {e.iou:.4f}  ({e.seconds:.1f}s)")

    acc_target = None if args.no_early_stop else args.target_accuracy
    iou_target = None if args.no_early_stop else args.target_iou
    result = training.train(net, dataset, tcfg, seed=args.seed,
                            target_accuracy=acc_target,
                            target_iou=iou_target, log=log)
    io.write_weights(str(out / "weights.bin"), net.parameters())
    network.save_config(out / "config.json", cfg, tcfg)
    report.write_train_log_csv(result.history, out / "train_log.csv")
    report.write_loss_curve(result.history, out / "loss_curve.png")
    last = result.history[-1] if result.history else None
    if result.reached_targets:
        print(f"targets reached at epoch {last.epoch}")
    elif last is not None:
        print(f"finished {len(result.history)} epochs "
              f"(acc {last.accuracy:.4f}, iou {last.iou:.4f})")
    print(f"wrote weights.bin, config.json, train_log.csv, loss_curve.png to {out}")
    return 0


# ---------------------------------------------------------------------------
# segment


def _cmd_segment(args) -> int:
    out = _out_dir(args)
    cfg, _ = _load(args)
    clip = io.read_clip(args.clip)
    dims = clip.data.shape[:3]
    net = network.SegmentationNetwork(cfg, dims, seed=args.seed, variant=args.variant)
    net.load_weights(io.read_weights(args.weights))
    logits = net.forward(clip)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=-1, keepdims=True)
    pred = np.argmax(logits.data, axis=-1).astype(np.int64)

    stem = Path(args.clip).stem
    io.write_clip(str(out / f"{stem}_mask.clip"), _labels_to_clip(pred))
    report.write_clip_montage(clip, pred, out / f"{stem}_overlay.png",
                              title=f"{stem}: predicted foreground")
    with open(out / f"{stem}_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "foreground_pixels", "foreground_fraction",
                         "mean_foreground_prob"])
        fg_prob = 1.0 - prob[..., 0]
        for f in range(dims[2]):
            fg = pred[:, :, f] != 0
            writer.writerow([f, int(fg.sum()), f"{fg.mean():.6f}",
                             f"{fg_prob[:, :, f].mean():.6f}"])
    print(f"wrote {stem}_mask.clip, {stem}_overlay.png, {stem}_summary.csv to {out}")
    return 0


# ---------------------------------------------------------------------------
# cost-report


def _cmd_cost_report(args) -> int:
    out = _out_dir(args)
    cfg, tcfg = _load(args)
    dims = _default_dims(args, tcfg)
    reports = {
        v: costmodel.network_cost(cfg, dims, variant=v,
                                  include_encoder=args.include_encoder)
        for v in VARIANTS
    }
    report.write_cost_summary_csv(reports, out / "cost_summary.csv")
    report.write_cost_layers_csv(reports, out / "cost_layers.csv")
    report.write_cost_figure(reports, out / "cost_ops.png")
    base = reports["standard"].ops
    scope = "with encoder" if args.include_encoder else "pyramid+decoder+head"
    print(f"input {dims[0]}x{dims[1]}x{dims[2]} ({scope})")
    for variant, rep in reports.items():
        print(f"  {variant:<10} macs {rep.multiply_adds:>16,}  ops {rep.ops:>16,}  "
              f"params {rep.params:>12,}  ops/standard {rep.ops / base:.6f}")
    print(f"wrote cost_summary.csv, cost_layers.csv, cost_ops.png to {out}")
    return 0


# ---------------------------------------------------------------------------
# bench


def _cmd_bench(args) -> int:
    out = _out_dir(args)
    cfg, tcfg = _load(args)
    dims = _default_dims(args, tcfg)
    variants = [args.variant] if args.variant else list(VARIANTS)
    rng = np.random.default_rng(args.seed)
    clip = ClipTensor(rng.standard_normal((*dims, cfg.in_channels)))
    rows = []
    for variant in variants:
        net = network.SegmentationNetwork(cfg, dims, seed=args.seed, variant=variant)
        macs = counting.measured_macs(lambda: net.forward(clip))
        times = []
        for _ in range(args.repeats):
            started = time.perf_counter()
            net.forward(clip)
            times.append(time.perf_counter() - started)
        median = statistics.median(times)
        rows.append({"variant": variant, "median_seconds": median,
                     "multiply_adds": macs,
                     "macs_per_second": macs / median if median > 0 else float("inf")})
        print(f"  {variant:<10} median {median:.4f}s  macs {macs:,}  "
              f"({rows[-1]['macs_per_second']:.3e} mac/s)")
    report.write_bench_csv(rows, out / "bench.csv")
    report.write_bench_figure(rows, out / "bench.png")
    print(f"wrote bench.csv, bench.png to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sep3d",
        description="separable 3D convolutional video segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, dims_flag: bool = False) -> None:
        p.add_argument("--config", default="toy64",
                       help="JSON config path or bundled name (toy64, ref320)")
        p.add_argument("--seed", type=int, default=0, help="RNG seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--variant", choices=VARIANTS, default=None,
                       help="override the config's convolution realization")
        if dims_flag:
            p.add_argument("--dims", default=None,
                           help="input HxWxT (default: training crop and length)")

    p = sub.add_parser("synth", help="write synthetic moving-shape clips")
    common(p)
    p.add_argument("--clips", type=int, default=4, help="number of clips")
    p.add_argument("--dims", default="64x64x8", help="clip HxWxT")
    p.add_argument("--noise", type=float, default=0.05, help="additive noise scale")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="fit the network and save weights")
    common(p)
    p.add_argument("--data", default=None,
                   help="directory of clip/label pairs (default: synthesize)")
    p.add_argument("--clips", type=int, default=4,
                   help="synthetic clips when --data is not given")
    p.add_argument("--epochs", type=int, default=None, help="override epoch count")
    p.add_argument("--target-accuracy", type=float, default=0.99,
                   help="stop early once eval accuracy exceeds this")
    p.add_argument("--target-iou", type=float, default=0.9,
                   help="stop early once foreground IoU exceeds this")
    p.add_argument("--no-early-stop", action="store_true",
                   help="ignore the targets and run every epoch")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("segment", help="run a trained network over a clip")
    common(p)
    p.add_argument("clip", help="input clip file")
    p.add_argument("--weights", required=True, help="weights file from train")
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("cost-report", help="closed-form work and memory tables")
    common(p, dims_flag=True)
    p.add_argument("--include-encoder", action="store_true",
                   help="count the shared encoder as well")
    p.set_defaults(func=_cmd_cost_report)

    p = sub.add_parser("bench", help="timed forward passes with measured work")
    common(p, dims_flag=True)
    p.add_argument("--repeats", type=int, default=3, help="timed repetitions")
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"sep3d: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"sep3d: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
