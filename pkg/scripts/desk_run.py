#!/usr/bin/env python3
"""Desk-scale reference run: 200 synthetic training images, AP@50 on 50 validation images.

    python3 scripts/desk_run.py --out results/desk_run
    python3 scripts/desk_run.py --epochs 40 --lr-scale 20 --eval-every 10

Writes summary.json and the per-step training log into --out.
"""

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from deskseg.experiment import DeskRunConfig, desk_data, run_desk
from deskseg.model import ModelConfig
from deskseg.train import evaluate_samples


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("results/desk_run"))
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--eval-every", type=int, default=0, help="validation AP every N epochs (0 = only at the end)")
    defaults = DeskRunConfig()
    for f in fields(DeskRunConfig):
        if f.name == "model":
            continue
        p.add_argument("--" + f.name.replace("_", "-"), type=type(getattr(defaults, f.name)), default=None)
    return p.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    overrides = {f.name: getattr(args, f.name) for f in fields(DeskRunConfig) if getattr(args, f.name, None) is not None}
    cfg = DeskRunConfig(**overrides)
    args.out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    val = desk_data(cfg)[1] if args.eval_every else None
    mcfg = ModelConfig(**{**cfg.model, "seed": cfg.seed})

    def progress(epoch, params):
        line = f"epoch {epoch + 1:4d}  {time.perf_counter() - start:7.0f}s"
        if val is not None and (epoch + 1) % args.eval_every == 0:
            r = evaluate_samples(params, mcfg, val, cfg.score_threshold)
            line += f"  seg AP50 {r['segmentation'].ap50:.3f}  det AP50 {r['detection'].ap50:.3f}"
        print(line, flush=True)

    with threadpool_limits(args.threads):
        result = run_desk(cfg, args.out / "train_log.jsonl", progress)
    (args.out / "summary.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"seg AP50 {result['segmentation_ap50']:.3f}  det AP50 {result['detection_ap50']:.3f}  "
          f"in {result['seconds']:.0f}s over {result['steps']} steps")
    return 0


if __name__ == "__main__":
    sys.exit(main())
