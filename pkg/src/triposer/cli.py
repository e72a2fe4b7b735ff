"""Command-line entry point: ``triposer <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import FormatError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; we reserve 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _view(s: str):
    if s.lower() in ("+x", "-x", "+y", "-y", "+z", "-z"):
        return s.lower()
    try:
        az, el = (float(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("view is one of +x,-x,+y,-y,+z,-z or 'azimuth,elevation'") from None
    return (az, el)


def cmd_encode_skeleton(args) -> int:
    from .skeleton import WorldBounds, encode, load_skeleton
    from .triplane import encoding_to_triplane, save

    skel = load_skeleton(args.skeleton)
    bounds = WorldBounds.from_list(args.bounds) if args.bounds else WorldBounds()
    enc = encode(skel, bounds, args.size, args.size, mode=args.mode, sigma_px=args.sigma)
    if args.mode == "heatmap":
        from .triplane import KIND_ENCODING, Triplane
        from .skeleton import expand_to_channels

        x = expand_to_channels(enc, args.channels)
        t = Triplane(x[:, :args.channels], x[:, args.channels:], bounds, KIND_ENCODING)
    else:
        t = encoding_to_triplane(enc, args.channels, bounds)
    save(t, args.out)
    return EXIT_OK


def cmd_synth_dataset(args) -> int:
    from .synthetic import make_dataset

    _, manifest = make_dataset(args.chars, args.poses, args.channels, args.size, seed=args.seed,
                               out_dir=args.out, pose_offset=args.pose_offset)
    print(f"wrote {len(manifest['samples'])} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import TrainConfig, train

    try:
        d = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{args.config}: cannot read config ({exc})", "schema") from exc
    if args.seed is not None:
        d["seed"] = args.seed
    for key in ("dataset", "out_dir"):
        if getattr(args, key):
            d[key] = getattr(args, key)
    try:
        cfg = TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid training config: {exc}", "schema") from exc
    ckpt = train(cfg, resume=args.resume)
    print(ckpt)
    return EXIT_OK


def _load_model(path):
    from .denoiser import load_checkpoint
    from .diffusion import make_linear_schedule
    from .pipeline import schedule_from_dict

    model, extra = load_checkpoint(path)
    sched_params = extra.get("train_config", {}).get("schedule")
    if sched_params:
        sched = schedule_from_dict(sched_params)
    else:
        sched = make_linear_schedule(model.config.num_timesteps)
    return model, sched


def cmd_repose(args) -> int:
    from .pipeline import CLIP_X0, repose
    from .skeleton import load_skeleton
    from .triplane import load, save

    model, sched = _load_model(args.ckpt)
    out = repose(model, load(args.init), load_skeleton(args.skeleton), sched, args.seed,
                 clip_x0=None if args.no_clip else CLIP_X0)
    save(out, args.out)
    return EXIT_OK


def cmd_animate(args) -> int:
    from .pipeline import CLIP_X0, animate
    from .skeleton import MotionSequence, load_motion
    from .triplane import load, save

    model, sched = _load_model(args.ckpt)
    motion = load_motion(args.motion)
    if args.frames is not None:
        if args.frames < 1:
            raise ValueError("--frames must be >= 1")
        # cycle the motion when more frames are requested than it holds
        motion = MotionSequence(tuple(motion.frames[k % len(motion)] for k in range(args.frames)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def flush(t, tri):
        save(tri, out / f"frame{t:04d}.trpl")

    animate(model, load(args.init), motion, sched, args.seed, chain=args.chain, on_frame=flush,
            clip_x0=None if args.no_clip else CLIP_X0)
    return EXIT_OK


def cmd_render(args) -> int:
    from .renderer import RenderConfig, contact_sheet, render, write_ppm
    from .triplane import load

    cfg = RenderConfig(size=args.size, view=args.view, samples_per_ray=args.samples,
                       density_scale=args.density_scale)
    images = [render(load(p), cfg) for p in args.triplane]
    write_ppm(images[0] if len(images) == 1 else contact_sheet(images), args.out)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="triposer", description="Skeleton-conditioned triplane reposing at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("encode-skeleton", help="rasterize a skeleton JSON into a TRPL encoding")
    s.add_argument("skeleton")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--channels", type=int, default=4)
    s.add_argument("--mode", choices=("index", "heatmap"), default="index")
    s.add_argument("--sigma", type=float, default=None, help="heatmap sigma in pixels")
    s.add_argument("--bounds", type=float, nargs=6, default=None, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"))
    s.set_defaults(func=cmd_encode_skeleton)

    s = sub.add_parser("synth-dataset", help="generate a synthetic capsule-character dataset")
    s.add_argument("--chars", type=int, required=True)
    s.add_argument("--poses", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--channels", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pose-offset", type=int, default=0)
    s.set_defaults(func=cmd_synth_dataset)

    s = sub.add_parser("train", help="train a denoiser from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.add_argument("--dataset", default=None)
    s.add_argument("--out-dir", dest="out_dir", default=None)
    s.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("repose", help="repose an init triplane to a target skeleton")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--init", required=True)
    s.add_argument("--skeleton", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-clip", action="store_true", help="plain sampler without clamping the implied x0")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_repose)

    s = sub.add_parser("animate", help="generate one triplane per motion frame")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--init", required=True)
    s.add_argument("--motion", required=True)
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-clip", action="store_true", help="plain sampler without clamping the implied x0")
    s.add_argument("--chain", action="store_true", help="condition each frame on the previous output (experimental)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_animate)

    s = sub.add_parser("render", help="render one triplane (or a strip of several) to PPM")
    s.add_argument("--triplane", required=True, nargs="+")
    s.add_argument("--view", type=_view, default="+z")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--samples", type=int, default=128)
    s.add_argument("--density-scale", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error from _Parser
        return exc.code
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # bad values that argparse could not catch (e.g. size < 8) are usage errors
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
