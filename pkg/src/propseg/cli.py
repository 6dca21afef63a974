"""Command-line interface.

Subcommands:
  generate   write a synthetic benchmark dataset directory
  train      fit the mask head on a dataset's ground-truth tracks
  infer      run the online tracker over a dataset's detections
  eval       score predicted tracks against ground truth
  oracle     ground-truth substitution ladder report
  gradcheck  finite-difference audit of the head's analytic gradients

Exit codes: 0 success, 1 invalid input (usage, config, file contents),
2 internal error. Flags override config-file values, which override
built-in defaults. All file outputs are written atomically.
"""

import argparse
import dataclasses
import json
import sys
import traceback

from .affinity import default_propagator
from .config import load_run_config, override_config
from .datasets import build_suite
from .encoder import FrameEncoder
from .errors import CodecError, InputError, ShapeError
from .io import (
    annotations_to_json,
    atomic_write_text,
    load_annotations,
    load_dataset,
    load_params,
    loss_curve_to_csv,
    save_params,
    write_annotations,
    write_dataset,
)
from .metrics import (
    OracleFlags,
    evaluate,
    from_instance_tracks,
    ladder_emit,
    oracle_ladder,
    report_emit,
)
from .tracker import run_video
from .training import gradient_check, train

_FORMATS = ("text", "csv", "json")

_FLAG_ALIASES = {
    "box": "box",
    "class": "category",
    "category": "category",
    "mask": "mask",
    "track": "track",
}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _common_flags():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH",
                   help="JSON run-configuration file")
    p.add_argument("--seed", type=int,
                   help="override the command's primary seed")
    return p


def build_parser():
    common = _common_flags()
    parser = _Parser(
        prog="propseg",
        description="Mask-propagation video instance segmentation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    g = sub.add_parser(
        "generate", parents=[common],
        help="write a synthetic moving-shapes benchmark dataset",
    )
    g.add_argument("out_dir", help="dataset directory to create")
    g.add_argument("--videos", type=int, help="number of videos")
    g.add_argument("--frames", type=int, help="frames per video")
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--min-instances", type=int)
    g.add_argument("--max-instances", type=int)
    g.add_argument("--background", choices=("flat", "gradient"))
    g.add_argument("--miss-rate", type=float,
                   help="per-instance-frame detector miss probability")
    g.add_argument("--box-jitter", type=float,
                   help="std of Gaussian box-corner noise, pixels")
    g.add_argument("--mask-erosion", type=int,
                   help="4-connected erosion iterations on detected masks")
    g.add_argument("--score-noise", type=float,
                   help="std of the detector score perturbation")
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser(
        "train", parents=[common],
        help="train the mask head on a dataset's ground truth",
    )
    t.add_argument("dataset", help="dataset directory from `generate`")
    t.add_argument("--params-out", metavar="PATH",
                   help="where to write trained parameters")
    t.add_argument("--curve-out", metavar="PATH",
                   help="where to write the per-step loss CSV")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--decay-factor", type=float)
    t.add_argument("--delta-max", type=int)
    t.add_argument("--attention-weight", type=float,
                   help="weight of the attention loss term")
    t.add_argument("--attention-mode", choices=("standard", "literal"))
    t.add_argument("--hidden-channels", type=int, default=16)
    t.add_argument("--stride", type=int, help="pixels per feature cell")
    t.add_argument("--quiet", action="store_true",
                   help="suppress progress lines")
    t.set_defaults(func=_cmd_train)

    i = sub.add_parser(
        "infer", parents=[common],
        help="track and fill a dataset's detections",
    )
    i.add_argument("dataset", help="dataset directory from `generate`")
    i.add_argument("--params", metavar="PATH",
                   help="trained parameter file from `train`")
    i.add_argument("--out", metavar="PATH",
                   help="where to write predicted tracks (annotation JSON)")
    i.add_argument("--no-fill", action="store_true",
                   help="disable propagation filling of detector misses")
    i.add_argument("--match-iou", type=float)
    i.add_argument("--fill-threshold", type=float)
    i.add_argument("--delta-max", type=int)
    i.add_argument("--max-misses", type=int)
    i.add_argument("--binarize", type=float,
                   help="probability threshold for filled masks")
    i.add_argument("--upsample", choices=("nearest", "bilinear"))
    i.add_argument("--stride", type=int)
    i.set_defaults(func=_cmd_infer)

    e = sub.add_parser(
        "eval", parents=[common],
        help="score predicted tracks against ground truth",
    )
    e.add_argument("predictions", help="annotation JSON with predicted tracks")
    e.add_argument("ground_truth", help="annotation JSON with true tracks")
    e.add_argument("--format", choices=_FORMATS, default="text")
    e.add_argument("--out", metavar="PATH",
                   help="write the report here instead of stdout")
    e.set_defaults(func=_cmd_eval)

    o = sub.add_parser(
        "oracle", parents=[common],
        help="ground-truth substitution ladder",
    )
    o.add_argument("predictions", help="annotation JSON with predicted tracks")
    o.add_argument("ground_truth", help="annotation JSON with true tracks")
    o.add_argument("--flags", required=True, metavar="LIST",
                   help="comma-separated subset of box,class,mask,track")
    o.add_argument("--format", choices=_FORMATS, default="text")
    o.add_argument("--out", metavar="PATH",
                   help="write the report here instead of stdout")
    o.set_defaults(func=_cmd_oracle)

    gc = sub.add_parser(
        "gradcheck", parents=[common],
        help="check analytic gradients against finite differences",
    )
    gc.add_argument("--fixtures", type=int, default=25)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--step-size", type=float, default=1e-4)
    gc.add_argument("--channels", type=int, default=2)
    gc.add_argument("--hidden-channels", type=int, default=4)
    gc.set_defaults(func=_cmd_gradcheck)

    return parser


def _deliver(text, out_path):
    if out_path:
        atomic_write_text(out_path, text)
        print(f"wrote report to {out_path}")
    else:
        sys.stdout.write(text)


def _cmd_generate(args):
    cfg = load_run_config(args.config)
    cfg = override_config(
        cfg, "scene",
        n_videos=args.videos,
        frame_count=args.frames,
        width=args.width,
        height=args.height,
        min_instances=args.min_instances,
        max_instances=args.max_instances,
        background=args.background,
    )
    cfg = override_config(
        cfg, "detector",
        miss_rate=args.miss_rate,
        box_jitter=args.box_jitter,
        mask_erosion=args.mask_erosion,
        score_noise=args.score_noise,
    )
    seed = args.seed if args.seed is not None else cfg.seed
    detector = dataclasses.replace(cfg.detector, seed=seed)
    scene = cfg.scene
    bundle = build_suite(
        seed, detector,
        n_videos=scene.n_videos,
        width=scene.width,
        height=scene.height,
        frame_count=scene.frame_count,
        min_instances=scene.min_instances,
        max_instances=scene.max_instances,
        background=scene.background,
    )
    write_dataset(args.out_dir, bundle)
    print(
        f"wrote {len(bundle.videos)} videos "
        f"({bundle.total_instances} instances) to {args.out_dir}"
    )
    return 0


def _cmd_train(args):
    cfg = load_run_config(args.config)
    cfg = override_config(
        cfg, "train",
        steps=args.steps,
        lr=args.lr,
        momentum=args.momentum,
        decay_factor=args.decay_factor,
        delta_max=args.delta_max,
        attention_loss_weight=args.attention_weight,
        attention_loss_mode=args.attention_mode,
        seed=args.seed,
    )
    cfg = override_config(cfg, "encoder", stride=args.stride)
    videos, _ = load_dataset(args.dataset)
    encoder = FrameEncoder(**dataclasses.asdict(cfg.encoder))

    total = cfg.train.steps
    notch = max(1, total // 10)

    def progress(step, report):
        if not args.quiet and (step + 1) % notch == 0:
            print(f"step {step + 1}/{total}: total loss {report.total:.6f}")

    params, curve = train(
        videos, cfg.train,
        encoder=encoder,
        propagator=default_propagator(),
        hidden_channels=args.hidden_channels,
        on_step=progress,
    )
    params_path = args.params_out or cfg.paths.params
    curve_path = args.curve_out or cfg.paths.curve
    save_params(params, params_path)
    atomic_write_text(curve_path, loss_curve_to_csv(curve, cfg.train))
    print(f"saved parameters to {params_path}, loss curve to {curve_path}")
    return 0


def _cmd_infer(args):
    cfg = load_run_config(args.config)
    cfg = override_config(
        cfg, "pipeline",
        match_iou=args.match_iou,
        fill_threshold=args.fill_threshold,
        delta_max=args.delta_max,
        max_misses=args.max_misses,
        mask_binarize=args.binarize,
        upsample=args.upsample,
    )
    cfg = override_config(cfg, "encoder", stride=args.stride)
    videos, detections = load_dataset(args.dataset)
    params = load_params(args.params or cfg.paths.params)
    encoder = FrameEncoder(**dataclasses.asdict(cfg.encoder))
    propagator = default_propagator()

    tracks_per_video = []
    for video in videos:
        dets = detections.get(video.video_id)
        if dets is None:
            dets = [[] for _ in range(video.frame_count)]
        tracks = run_video(
            video.frames, dets,
            encoder=encoder,
            head_params=params,
            cfg=cfg.pipeline,
            fill=not args.no_fill,
            propagator=propagator,
        )
        tracks_per_video.append(from_instance_tracks(tracks, video.video_id))

    out = args.out or cfg.paths.predictions
    write_annotations(out, annotations_to_json(videos, tracks_per_video))
    n_tracks = sum(len(ts) for ts in tracks_per_video)
    print(f"wrote {n_tracks} predicted tracks to {out}")
    return 0


def _cmd_eval(args):
    cfg = load_run_config(args.config)
    preds = load_annotations(args.predictions)
    gts = load_annotations(args.ground_truth)
    report = evaluate(preds, gts, cfg.eval)
    _deliver(report_emit(report, args.format), args.out or cfg.paths.report)
    return 0


def _parse_oracle_flags(text):
    names = [part.strip() for part in text.split(",") if part.strip()]
    if not names:
        raise InputError("--flags needs at least one of box,class,mask,track")
    kwargs = {}
    for name in names:
        if name not in _FLAG_ALIASES:
            raise InputError(
                f"unknown oracle flag {name!r} (choose from box,class,mask,track)"
            )
        kwargs[_FLAG_ALIASES[name]] = True
    return OracleFlags(**kwargs)


def _cmd_oracle(args):
    cfg = load_run_config(args.config)
    flags = _parse_oracle_flags(args.flags)
    preds = load_annotations(args.predictions)
    gts = load_annotations(args.ground_truth)
    rows = oracle_ladder(preds, gts, flags, cfg.eval)
    _deliver(ladder_emit(rows, args.format), args.out or cfg.paths.report)
    return 0


def _cmd_gradcheck(args):
    cfg = load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    report = gradient_check(
        fixtures=args.fixtures,
        seed=seed,
        channels=args.channels,
        hidden_channels=args.hidden_channels,
        step_size=args.step_size,
        tolerance=args.tolerance,
    )
    for i, err in enumerate(report.per_fixture):
        print(f"fixture {i:02d}: max rel err {err:.3e}")
    status = "PASS" if report.passed else "FAIL"
    print(
        f"gradient check {status}: {report.fixtures} fixtures, "
        f"{report.checked} probes ({report.skipped} kink-skipped), "
        f"worst {report.max_relative_error:.3e}, "
        f"tolerance {report.tolerance:g}"
    )
    return 0 if report.passed else 1


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.func(args)
    except (InputError, ShapeError, CodecError, OSError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
