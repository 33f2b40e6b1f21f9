#!/usr/bin/env python3
"""Audit preset compute budgets: per-layer table plus the cross-preset curve.

Usage:
    python scripts/flops_audit.py            # curve over the full presets
    python scripts/flops_audit.py --preset 880M --layers
"""

import argparse

from mvt import flops
from mvt.model import presets


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--preset", help="show one preset instead of the curve")
    parser.add_argument("--layers", action="store_true",
                        help="include the per-layer breakdown")
    args = parser.parse_args()

    table = presets()
    if args.preset:
        cfg = table[args.preset]
        report = flops.count(cfg)
        print(f"{cfg.preset_name}: {report.total_macs:,} MACs, "
              f"{report.total_params:,} params, tokens {cfg.token_layout()}")
        if args.layers:
            print(report.render_table())
        return
    names = ["880M", "610M", "310M", "desk-64", "desk-32"]
    print(flops.compression_curve([table[n] for n in names]))


if __name__ == "__main__":
    main()
