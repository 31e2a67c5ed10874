"""Parameter and FLOP table for several model geometries.

The default geometry (per-pixel tokens, D = 64) lands far below the
published 49.03M parameters; flattening 3x3 pixel patches into tokens
(D = 576) accounts for nearly all of it. Both are listed side by side.
"""

import argparse

from ctnet.complexity import PUBLISHED_FLOPS, PUBLISHED_PARAMS, count_parameters, estimate_flops, per_block
from ctnet.config import ModelConfig

VARIANTS = {
    "default (pixel tokens, window 8)": ModelConfig.full(),
    "3x3-patch tokens, window 16, 12 heads": ModelConfig.full(token_patch=3, window=16, heads=12),
    "3x3-patch tokens, window 8, 12 heads": ModelConfig.full(token_patch=3, window=8, heads=12),
    "without TM in SB": ModelConfig.full(sb_tm=False),
    "without ITM": ModelConfig.full(subnet3_itm=False),
    "serial architecture": ModelConfig.full(serial=True),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, nargs=2, default=(48, 48), metavar=("H", "W"))
    ap.add_argument("--blocks", action="store_true", help="also print per-block breakdowns")
    args = ap.parse_args()
    h, w = args.size
    print(f"reference: {PUBLISHED_PARAMS / 1e6:.2f}M params, {PUBLISHED_FLOPS / 1e9:.2f}G FLOPs\n")
    print(f"{'variant':<40} {'params':>12} {'vs ref':>8} {'GFLOPs':>9}")
    for name, cfg in VARIANTS.items():
        n = count_parameters(cfg)
        f = estimate_flops(cfg, h, w)
        print(f"{name:<40} {n:>12,} {100 * (n / PUBLISHED_PARAMS - 1):>+7.1f}% {f / 1e9:>9.3f}")
        if args.blocks:
            for block, (p, fl) in per_block(cfg, h, w).items():
                print(f"    {block:<36} {p:>12,} {'':>8} {fl / 1e9:>9.3f}")


if __name__ == "__main__":
    main()
