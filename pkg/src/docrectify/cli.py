"""Command-line front end.

Exit codes: 0 success, 2 validation/contract error, 3 numeric error
(NaN, failed inversion), 4 file-system error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import resolve_config
from .errors import ContractError, NumericError

EXIT_OK, EXIT_CONTRACT, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--preset", choices=("paper", "desk"))
    p.add_argument("--seed", type=int)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--out", required=True, help="output directory or checkpoint path")
    p.add_argument("--checkpoint", help="input checkpoint")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="docrectify", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic distorted-page corpus")
    _common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--spot-check", type=float, default=0.1)

    p = sub.add_parser("pretrain", help="masked-reconstruction pre-training")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", help="continue from a pre-training checkpoint")

    p = sub.add_parser("finetune", help="train the flow rectifier")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", help="continue from a fine-tuning checkpoint")
    p.add_argument("--freeze-encoder", action="store_true", default=None)
    p.add_argument("--from-scratch", action="store_true", default=None)

    p = sub.add_parser("rectify", help="rectify an image, a directory or a corpus")
    _common(p)
    p.add_argument("input")

    p = sub.add_parser("eval", help="score rectified outputs against a corpus")
    _common(p)
    p.add_argument("pred_dir")
    p.add_argument("--corpus")

    p = sub.add_parser("demo-reconstruct", help="masked input / reconstruction / target triples")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--count", type=int, default=4)
    return parser


def _config(args):
    return resolve_config(args.preset, args.config, seed=args.seed, mask_ratio=args.mask_ratio,
                          epochs=getattr(args, "epochs", None),
                          freeze_encoder=getattr(args, "freeze_encoder", None),
                          from_scratch=getattr(args, "from_scratch", None),
                          corpus=getattr(args, "corpus", None))


def _need_corpus(cfg) -> str:
    if not cfg.corpus:
        raise ContractError("no corpus given (--corpus or corpus= in the config file)")
    return cfg.corpus


def _need_checkpoint(args) -> str:
    if not args.checkpoint:
        raise ContractError(f"{args.command} needs --checkpoint")
    return args.checkpoint


def run(args) -> int:
    cmd = args.command
    if cmd == "gen-data":
        cfg = _config(args)
        manifest = pipeline.cmd_gen_data(cfg, args.out, args.count, args.spot_check)
        print(f"wrote {manifest['count']} samples to {args.out}")
    elif cmd == "pretrain":
        cfg = _config(args)
        loss = pipeline.cmd_pretrain(cfg, _need_corpus(cfg), args.out, args.resume,
                                     args.max_steps)
        print(f"final loss {loss:.6f}; checkpoint {args.out}")
    elif cmd == "finetune":
        cfg = _config(args)
        loss = pipeline.cmd_finetune(cfg, _need_corpus(cfg), args.checkpoint, args.out,
                                     args.resume, args.max_steps)
        print(f"final loss {loss:.6f}; checkpoint {args.out}")
    elif cmd == "rectify":
        result = pipeline.cmd_rectify(_need_checkpoint(args), args.input, args.out)
        print(f"rectified {len(result.written)} images, {len(result.errors)} errors")
        if not result.written and result.errors:
            return EXIT_IO
    elif cmd == "eval":
        cfg = _config(args)
        res = pipeline.cmd_eval(args.pred_dir, _need_corpus(cfg),
                                f"{args.out.rstrip('/')}/report.csv")
        agg = res.aggregate
        print(f"{len(res.rows)} samples: ms_ssim {agg.ms_ssim}, ld_epe {agg.ld_epe}, "
              f"cer {agg.cer}; {len(res.missing)} missing")
    elif cmd == "demo-reconstruct":
        cfg = _config(args)
        ids = pipeline.cmd_demo_reconstruct(_need_checkpoint(args), _need_corpus(cfg), args.out,
                                            args.mask_ratio, args.count)
        print(f"wrote {len(ids)} reconstruction triples to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
