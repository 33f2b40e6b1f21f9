#!/usr/bin/env python3
"""Build the 3x3 embedding/readout ablation grid and smoke every variant.

Each of {naive, conv, ipe} x {class_token, avg_pool, apm} is refit to the base
preset's compute budget, constructed, and driven through one forward/backward
pass; the table reports MACs, params, and sequence length per variant.
"""

import argparse
import time

import numpy as np

from mvt import flops
from mvt.model import ablation_variants, build_model, presets
from mvt.train import loss_and_grads, smooth_targets


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--preset", default="desk-64",
                        help="base preset to perturb (desk scale recommended)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    base = presets()[args.preset]
    rng = np.random.default_rng(args.seed)
    images = rng.normal(size=(2, 3, base.input_size, base.input_size))
    labels = rng.integers(0, base.num_classes, size=2)
    targets = smooth_targets(labels, base.num_classes, 0.1)

    header = f"{'variant':<32} {'macs':>12} {'params':>10} {'seq':>4} {'fwd+bwd':>8}"
    print(header)
    print("-" * len(header))
    for cfg in ablation_variants(base):
        report = flops.count(cfg)
        model = build_model(cfg, seed=args.seed)
        t0 = time.perf_counter()
        loss, grads = loss_and_grads(model, images, targets)
        dt = time.perf_counter() - t0
        assert len(grads) == len(model.params)
        print(f"{cfg.preset_name:<32} {report.total_macs:>12,} "
              f"{report.total_params:>10,} {cfg.seq_len:>4} {dt * 1e3:>6.0f}ms")


if __name__ == "__main__":
    main()
