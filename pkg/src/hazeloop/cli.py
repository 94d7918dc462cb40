"""Command-line surface: synth, train, infer, eval.

Exit codes: 0 success, 1 config error, 2 I/O error, 3 routing error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import fileio, pipeline, synthdata
from .config import Config, format_config, load_config
from .errors import ConfigError, InputError, NumericError, RoutingError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_ROUTING = 3
EXIT_NUMERIC = 4


def _resolve_config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config().validate()
    print("# resolved config")
    print(format_config(cfg))
    return cfg


def cmd_synth(args):
    cfg = _resolve_config(args)
    out_dir = args.out or cfg.data_out_dir
    manifest = synthdata.generate_dataset(
        out_dir, args.count, cfg, seed=cfg.train_seed, size=args.size
    )
    print(f"wrote {args.count} records to {manifest}")
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve_config(args)
    manifest = args.manifest or cfg.data_manifest
    if not manifest:
        raise ConfigError("no dataset: pass --manifest or set data.manifest")
    if cfg.train_stage == 1:
        pipeline.train_stage1(manifest, cfg, args.out)
    else:
        if not args.idn_ckpt:
            raise ConfigError("stage 2 requires --idn-ckpt")
        pipeline.train_stage2(manifest, args.idn_ckpt, cfg, args.out)
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_infer(args):
    cfg = _resolve_config(args)
    bundle = pipeline.ModelBundle.load(args.ckpt, cfg)
    hazy = fileio.load_image(args.image)
    if bundle.has_stage2:
        out, _, trace = pipeline.closed_loop_infer(
            hazy, args.instruction, bundle, k_max=cfg.loop_k_max
        )
        for entry in trace:
            print(f"# iteration {entry['iteration']}: task={entry['task']}")
    else:
        # still validate the route so bad instructions fail loudly
        adapter = pipeline.route_instruction(args.instruction, bundle.registry)
        print(
            f"# warning: checkpoint has no stage-2 modules; open-loop output "
            f"(route would be {adapter.name})"
        )
        out = pipeline.open_loop_infer(hazy, bundle)
    fileio.save_image(args.out, out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _resolve_config(args)
    manifest = args.manifest or cfg.data_manifest
    if not manifest:
        raise ConfigError("no dataset: pass --manifest or set data.manifest")
    bundle = pipeline.ModelBundle.load(args.ckpt, cfg)
    rows, mean_row = pipeline.evaluate(manifest, bundle, args.out, k_max=cfg.loop_k_max)
    print(f"wrote {len(rows)} rows + mean to {args.out}")
    print(f"mean psnr: {mean_row['psnr']:.3f}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hazeloop")
    parser.add_argument("--config", help="flat key=value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a toy dataset")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", help="output directory (defaults to data.out_dir)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train stage 1 or 2 (per train.stage)")
    p.add_argument("--manifest", help="dataset manifest (defaults to data.manifest)")
    p.add_argument("--idn-ckpt", help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="dehaze one image, closed-loop when possible")
    p.add_argument("--image", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="emit per-image CSV metrics")
    p.add_argument("--manifest", help="dataset manifest (defaults to data.manifest)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RoutingError as exc:
        print(f"routing error: {exc}", file=sys.stderr)
        return EXIT_ROUTING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, InputError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
