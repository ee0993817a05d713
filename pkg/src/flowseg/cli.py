"""Command-line interface: generate / fit / eval / calibrate / bench.

Every subcommand resolves its arguments into an effective_config.json next
to its outputs, derives all randomness from a single --seed (split
deterministically per scene and frame), and maps library errors onto exit
codes: 0 success, 2 invalid arguments, 3 data or format errors, 4 numerical
failures.
"""

import argparse
import glob
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .core import FlowField, HardMaskStack, lattice
from .errors import (
    FormatError,
    GenerationError,
    NumericalError,
)
from .fit import FitConfig, fit_masks
from .likelihood import nll_affine, nll_oracle
from .metrics import fg_ari, miou_hungarian, postprocess_connected_components
from .motion import MotionModelKind, default_prior, estimate_prior_covariance, load_prior, save_prior
from .objective import ObjectiveConfig, derive_seed
from .simulator import SceneSpec, generate_sequence, read_sequence, write_sequence
from .warp import Frame, WarpPair


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _nonnegative_float(text):
    value = float(text)
    if value < 0.0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _size(text):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("size must look like HxW, e.g. 64x64")
    h, w = (int(p) for p in parts)
    if h < 4 or w < 4:
        raise argparse.ArgumentTypeError("height and width must be >= 4")
    return h, w


def _object_range(text):
    parts = text.split("-")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("object range must look like MIN-MAX, e.g. 3-6")
    lo, hi = (int(p) for p in parts)
    if not (1 <= lo <= hi <= 10):
        raise argparse.ArgumentTypeError("object range must satisfy 1 <= MIN <= MAX <= 10")
    return lo, hi


def _write_effective_config(directory, command, args):
    os.makedirs(directory, exist_ok=True)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    config["command"] = command
    path = os.path.join(directory, "effective_config.json")
    with open(path, "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _scene_dirs(root):
    """A dataset is either one sequence dir or a dir of scene_* sequences."""
    if os.path.exists(os.path.join(root, "manifest.json")):
        return [root]
    dirs = sorted(glob.glob(os.path.join(root, "scene_[0-9]*")))
    dirs = [d for d in dirs if os.path.isdir(d)]
    if not dirs:
        raise FormatError("%s: no manifest.json and no scene_* subdirectories" % root)
    return dirs


def cmd_generate(args):
    _write_effective_config(args.out, "generate", args)
    h, w = args.size

    def build(index):
        spec = SceneSpec(
            height=h,
            width=w,
            frames=args.frames,
            seed=derive_seed(args.seed, index),
            objects=args.objects,
            p_static=args.p_static,
            camera_motion=args.camera_motion,
            theta_style=args.theta_style,
            scenario_mixture=args.scenario_mixture,
            perspective_violation=args.perspective_violation,
            flow_noise_sigma=args.flow_noise,
        )
        record = generate_sequence(spec)
        write_sequence(record, os.path.join(args.out, "scene_%04d" % index))

    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        list(pool.map(build, range(args.scenes)))


def _load_fit_prior(args):
    kind = MotionModelKind.parse(args.model)
    if args.prior is not None:
        prior = load_prior(args.prior)
        if prior.kind is not kind:
            raise ValueError(
                "prior file is %s but --model is %s" % (prior.kind.value, kind.value)
            )
        return prior
    return default_prior(kind)


def _fit_one_scene(seq_dir, out_dir, prior, args, scene_seed):
    record = read_sequence(seq_dir)
    man = record.manifest
    lat = lattice(man["height"], man["width"])
    n_frames = man["frames"]
    k = args.k if args.k is not None else man["k_true"]
    if k > 255:
        raise ValueError("k must fit in uint8 masks (k <= 255)")
    anneal = args.beta_anneal if args.beta_anneal > 0 else max(1, args.iters // 2)
    objective = ObjectiveConfig(
        n_samples=args.n_samples,
        gs_temperature=args.gs_temp,
        beta_start=args.beta_start,
        beta_end=args.beta_end,
        beta_anneal_iters=anneal,
    )
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for t in range(n_frames):
        if t < n_frames - 1:
            flow = record.forward_flows[t]
            partner = t + 1
            pair = WarpPair(record.forward_flows[t], record.backward_flows[t])
        else:
            flow = record.backward_flows[t - 1]
            partner = t - 1
            pair = WarpPair(record.backward_flows[t - 1], record.forward_flows[t - 1])
        config = FitConfig(
            k=k,
            iters=args.iters,
            step_size=args.lr,
            seed=scene_seed ^ t,
            objective=objective,
            use_warp=args.warp_loss,
        )
        frames = None
        warp_pair = None
        if args.warp_loss:
            frames = (
                Frame.from_image(record.images[t], lat),
                Frame.from_image(record.images[partner], lat),
            )
            warp_pair = pair
        _, report = fit_masks(flow, lat, prior, config, frames=frames, warp_pair=warp_pair)
        masks = report.masks if args.postprocess else report.raw_masks
        masks.labels.astype(np.uint8).tofile(os.path.join(out_dir, "mask_%04d.bin" % t))
        rows.append(
            {"frame": t, "final_loss": report.final_loss, "iterations": report.iterations}
        )
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "fit_report.json"), "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_fit(args):
    _write_effective_config(args.out, "fit", args)
    prior = _load_fit_prior(args)
    scene_dirs = _scene_dirs(args.data)

    def run(index):
        seq_dir = scene_dirs[index]
        if seq_dir == args.data:
            out_dir = args.out
        else:
            out_dir = os.path.join(args.out, os.path.basename(seq_dir))
        _fit_one_scene(seq_dir, out_dir, prior, args, derive_seed(args.seed, index))

    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        list(pool.map(run, range(len(scene_dirs))))


def _read_pred_masks(pred_dir, man):
    h, w, t = man["height"], man["width"], man["frames"]
    masks = []
    for i in range(t):
        path = os.path.join(pred_dir, "mask_%04d.bin" % i)
        if not os.path.exists(path):
            raise FormatError("%s: missing predicted mask" % path)
        data = np.fromfile(path, dtype=np.uint8)
        if data.size != h * w:
            raise FormatError(
                "mask_%04d.bin: expected %d labels, found %d" % (i, h * w, data.size)
            )
        masks.append(data.astype(np.int64))
    return masks


def cmd_eval(args):
    _write_effective_config(args.pred, "eval", args)
    gt_dirs = _scene_dirs(args.gt)
    rows = []
    for gt_dir in gt_dirs:
        record = read_sequence(gt_dir)
        man = record.manifest
        if gt_dir == args.gt:
            pred_dir = args.pred
        else:
            pred_dir = os.path.join(args.pred, os.path.basename(gt_dir))
        pred_masks = _read_pred_masks(pred_dir, man)
        lat = lattice(man["height"], man["width"])
        scene_name = os.path.basename(gt_dir)
        for i, (pred, gt_stack) in enumerate(zip(pred_masks, record.gt_masks)):
            if args.postprocess:
                stack = HardMaskStack(pred, k=int(pred.max()) + 1)
                pred = postprocess_connected_components(
                    stack, lat, k_keep=stack.k
                ).labels
            row = {
                "scene": scene_name,
                "frame": i,
                "fg_ari": fg_ari(pred, gt_stack.labels),
                "miou": miou_hungarian(pred, gt_stack.labels, fg_only=args.fg_only),
            }
            rows.append(row)
            print(json.dumps(row, sort_keys=True))
    summary = {
        "mean_fg_ari": float(np.mean([r["fg_ari"] for r in rows])),
        "mean_miou": float(np.mean([r["miou"] for r in rows])),
        "frames": len(rows),
    }
    print(json.dumps(summary, sort_keys=True))
    with open(os.path.join(args.pred, "metrics.json"), "w") as fh:
        json.dump({"frames": rows, "summary": summary}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_calibrate(args):
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    _write_effective_config(out_dir, "calibrate", args)
    kind = MotionModelKind.parse(args.model)
    records = [read_sequence(d) for d in _scene_dirs(args.data)]
    prior = estimate_prior_covariance(records, kind)
    save_prior(prior, args.out)
    print(json.dumps({"out": args.out, "diagonal": np.diag(prior.cov).tolist()}))


def cmd_bench(args):
    _write_effective_config(args.out, "bench", args)
    h, w = args.size
    lat = lattice(h, w)
    rng = np.random.default_rng(args.seed)
    labels = rng.integers(0, args.k, size=lat.n)
    masks = HardMaskStack(labels, k=args.k)
    flow = FlowField(rng.normal(0.0, 2.0, lat.n), rng.normal(0.0, 2.0, lat.n), lat)
    prior = default_prior(MotionModelKind.AFFINE)

    value_eff = nll_affine(flow, masks, lat, prior)
    value_orc = nll_oracle(flow, masks, lat, prior)
    rel = abs(value_eff - value_orc) / max(1.0, abs(value_orc))
    if rel > 1e-6:
        raise NumericalError(
            "efficient and oracle NLL disagree (relative error %.3e)" % rel
        )

    start = time.perf_counter()
    for _ in range(args.repeats):
        nll_affine(flow, masks, lat, prior)
    eff_per_call = (time.perf_counter() - start) / args.repeats

    oracle_repeats = min(3, args.repeats)
    start = time.perf_counter()
    for _ in range(oracle_repeats):
        nll_oracle(flow, masks, lat, prior)
    orc_per_call = (time.perf_counter() - start) / oracle_repeats

    report = {
        "size": "%dx%d" % (h, w),
        "k": args.k,
        "repeats": args.repeats,
        "efficient_seconds_per_call": eff_per_call,
        "oracle_seconds_per_call": orc_per_call,
        "ratio": orc_per_call / eff_per_call,
        "max_rel_diff": rel,
    }
    print(json.dumps(report, sort_keys=True))
    with open(os.path.join(args.out, "bench_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="flowseg",
        description="Motion-based segmentation: synthetic scenes, likelihood "
        "fitting, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate synthetic scenes")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=_positive_int, default=1)
    g.add_argument("--frames", type=_positive_int, default=2)
    g.add_argument("--size", type=_size, default=(64, 64))
    g.add_argument("--objects", type=_object_range, default=(3, 6))
    g.add_argument("--p-static", type=float, default=0.5)
    g.add_argument("--camera-motion", action="store_true")
    g.add_argument("--flow-noise", type=_nonnegative_float, default=0.0)
    g.add_argument("--theta-style", choices=("raw", "about_center"), default="raw")
    g.add_argument("--scenario-mixture", action="store_true")
    g.add_argument("--perspective-violation", type=_nonnegative_float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--threads", type=_positive_int, default=1)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit mask logits per frame")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--model", choices=("affine", "translation"), default="affine")
    f.add_argument("--k", type=_positive_int, default=None,
                   help="region count (default: the scene's k_true)")
    f.add_argument("--iters", type=_positive_int, default=800)
    f.add_argument("--lr", type=float, default=0.05)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--prior", default=None, help="prior JSON file (default: built-in)")
    f.add_argument("--beta-start", type=float, default=0.1)
    f.add_argument("--beta-end", type=float, default=-0.1)
    f.add_argument("--beta-anneal", type=int, default=0,
                   help="anneal iterations (default: half of --iters)")
    f.add_argument("--gs-temp", type=float, default=1.0)
    f.add_argument("--n-samples", type=_positive_int, default=3)
    f.add_argument("--warp-loss", action="store_true")
    f.add_argument("--postprocess", action="store_true")
    f.add_argument("--threads", type=_positive_int, default=1)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--postprocess", action="store_true")
    e.add_argument("--fg-only", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("calibrate", help="estimate a motion prior from data")
    c.add_argument("--data", required=True)
    c.add_argument("--model", choices=("affine", "translation"), default="affine")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    b = sub.add_parser("bench", help="time the closed form against the oracle")
    b.add_argument("--size", type=_size, default=(64, 64))
    b.add_argument("--k", type=_positive_int, default=4)
    b.add_argument("--repeats", type=_positive_int, default=50)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=".")
    b.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        args.func(args)
    except (FormatError, GenerationError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 3
    except NumericalError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 4
    except ValueError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
