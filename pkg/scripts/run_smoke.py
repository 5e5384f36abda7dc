"""End-to-end smoke run: corpus -> train -> generate -> evaluate.

Writes everything under an output directory (default ./smoke_run). With the
default desk-scale config this takes roughly half an hour on one CPU core;
pass --steps to shorten.
"""

import argparse
import sys
from pathlib import Path

from printforge import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="smoke_run")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--corpus-size", type=int, default=200)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "run.ini"
    cfg_path.write_text(f"""\
[corpus]
size = {args.corpus_size}
[train]
steps = {args.steps}
[generate]
ids = 10
impressions = 15
[run]
seed = {args.seed}
corpus_dir = {out / 'corpus'}
checkpoint = {out / 'checkpoint.gprnt'}
""", encoding="utf-8")

    steps = [
        ["gen-corpus", "--config", str(cfg_path), "--out", str(out / "corpus")],
        ["train", "--config", str(cfg_path), "--out", str(out / "checkpoint.gprnt")],
        ["generate", "--config", str(cfg_path), "--out", str(out / "dataset")],
        ["evaluate", "--config", str(cfg_path), "--out", str(out / "eval"),
         str(out / "dataset"), "--corpus", str(out / "corpus")],
    ]
    for argv in steps:
        print(f"+ printforge {' '.join(argv)}", flush=True)
        rc = cli.main(argv)
        if rc != 0:
            sys.exit(rc)


if __name__ == "__main__":
    main()
