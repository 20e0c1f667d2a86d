#!/usr/bin/env python3
"""Run one desk-scale experiment and print its measurements as JSON.

    python scripts/run_experiment.py ablation --set iters=800
    python scripts/run_experiment.py quality --out retina.nht
"""

import argparse
import json
import logging
import sys

from nht import experiments
from nht.trainer import parse_overrides

CONFIGS = {
    "ablation": experiments.ablation_config,
    "densify": experiments.densify_config,
    "quality": experiments.quality_config,
    "compression": experiments.quality_config,
}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("experiment", choices=["interp", "gradients", "compositor", "ablation", "densify",
                                          "compression", "determinism", "quality"])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="training config override (ablation, densify, compression, quality)")
    p.add_argument("--out", help="quality: also save the compressed model here")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = parse_overrides(args.set, CONFIGS[args.experiment]()) if args.experiment in CONFIGS else None
    if args.experiment == "interp":
        res = experiments.interpolation_suite()
    elif args.experiment == "gradients":
        res = experiments.gradient_check()
    elif args.experiment == "compositor":
        res = experiments.compositor_check()
    elif args.experiment == "ablation":
        res = experiments.encoding_ablation(cfg=cfg)
    elif args.experiment == "densify":
        res = experiments.densification_experiment(cfg=cfg)
    elif args.experiment == "determinism":
        res = experiments.determinism_check()
    elif args.experiment == "compression":
        _, model, img = experiments.quality_floor(cfg=cfg, return_model=True)
        res = experiments.compression_experiment(model, img)
    else:
        res = experiments.quality_floor(cfg=cfg, save_path=args.out)
    json.dump(res, sys.stdout, indent=2, default=float)
    print()


if __name__ == "__main__":
    main()
