"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _parser():
    p = argparse.ArgumentParser(
        prog="printforge",
        description="Controllable fingerprint generation and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="sectioned key=value config file")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--out", required=out_required, help="output path")

    common(sub.add_parser("gen-corpus", help="synthesize a training corpus"))
    sp = sub.add_parser("train", help="train the denoiser on a corpus")
    common(sp)
    sp.add_argument("--corpus", help="corpus directory (default: [run] corpus_dir)")
    sp = sub.add_parser("generate", help="emit an identity x impression dataset")
    common(sp)
    sp.add_argument("--checkpoint", help="trained checkpoint (default: [run] checkpoint)")
    sp = sub.add_parser("evaluate", help="run the evaluation suite on a dataset")
    common(sp)
    sp.add_argument("dataset", help="dataset directory with a manifest")
    sp.add_argument("--corpus", help="training corpus for leakage comparison")
    sp = sub.add_parser("style-extract", help="extract style embeddings from images")
    common(sp)
    sp.add_argument("images", nargs="+", help="reference image paths")
    return p


def main(argv=None) -> int:
    threads = os.environ.get("PRINTFORGE_THREADS")
    if threads:
        try:
            import torch
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"printforge: invalid PRINTFORGE_THREADS={threads!r}",
                  file=sys.stderr)
            return EXIT_CONFIG

    args = _parser().parse_args(argv)
    from . import config as config_mod
    from . import diffusion, numcore, pipeline

    try:
        cfg = config_mod.load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
    except config_mod.ConfigError as e:
        print(f"printforge: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    def progress(done, total, *rest):
        extra = f" loss {rest[0]:.4f}" if rest else ""
        print(f"printforge {args.command}: {done}/{total}{extra}", file=sys.stderr)

    try:
        if args.command == "gen-corpus":
            recs = pipeline.cmd_gen_corpus(cfg, args.out, progress=progress)
            print(f"wrote {len(recs)} corpus images to {args.out}")
        elif args.command == "train":
            corpus_dir = args.corpus or cfg.corpus_dir
            _, losses = pipeline.cmd_train(cfg, corpus_dir, args.out,
                                           progress=progress)
            print(f"trained {len(losses)} steps; checkpoint at {args.out}")
        elif args.command == "generate":
            ckpt = args.checkpoint or cfg.checkpoint
            if not os.path.exists(ckpt):
                raise pipeline.DataError(f"checkpoint not found: {ckpt}")
            recs = pipeline.cmd_generate(cfg, ckpt, args.out, progress=progress)
            print(f"wrote {len(recs)} images to {args.out}")
        elif args.command == "evaluate":
            report = pipeline.cmd_evaluate(cfg, args.dataset, args.out,
                                           corpus_dir=args.corpus)
            print(report.to_text())
        elif args.command == "style-extract":
            results = pipeline.cmd_style_extract(args.images, args.out)
            print(f"extracted {len(results)} embeddings to {args.out}")
    except config_mod.ConfigError as e:
        print(f"printforge: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (pipeline.DataError, FileNotFoundError) as e:
        print(f"printforge: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (diffusion.NonFiniteLoss, numcore.NonFiniteGradient,
            FloatingPointError) as e:
        print(f"printforge: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
