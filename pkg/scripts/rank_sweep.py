"""Adapter-parameter accounting across ranks (8, 64, 128, 256) for both
backbones at their default sizes, plus the rank-selection rule at a few
dataset sizes. Structure mirrors the rank-ablation study: capacity scales
with rank while the frozen base stays fixed.

Usage:
    python scripts/rank_sweep.py [--ranks 8,64,128,256]
"""

from __future__ import annotations

import argparse
import json

from migkit import lora
from migkit.config import RunConfig, apply_overrides
from migkit.pipeline import build_backbone


def sweep(backbone: str, ranks: list[int]) -> list[dict]:
    rows = []
    for rank in ranks:
        cfg = apply_overrides(RunConfig(), [f"backbone={backbone}", f"rank={rank}"])
        model, registry = build_backbone(cfg)
        base, adapter, ratio = lora.param_count(model)
        hand = sum(registry.config.rank * (layer.d_in + layer.d_out)
                   for layer in _matched_layers(model, registry))
        rows.append({"backbone": backbone, "rank": rank, "base": base,
                     "adapter": adapter, "hand_formula": hand, "ratio": ratio,
                     "layers": len(registry)})
    return rows


def _matched_layers(model, registry):
    from migkit.nn import Linear
    by_path = {path: mod for path, mod in model.named_modules()
               if isinstance(mod, Linear)}
    return [by_path[p] for p in registry.adapters]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ranks", default="8,64,128,256")
    args = ap.parse_args()
    ranks = [int(r) for r in args.ranks.split(",")]

    all_rows = []
    for backbone in ("unet", "dit"):
        rows = sweep(backbone, ranks)
        all_rows.extend(rows)
        print(f"\n{backbone} (base {rows[0]['base']} params, "
              f"{rows[0]['layers']} injected layers)")
        print(f"{'rank':>6} {'adapter':>10} {'ratio':>8}  matches hand formula")
        for r in rows:
            ok = "yes" if r["adapter"] == r["hand_formula"] else "NO"
            print(f"{r['rank']:>6} {r['adapter']:>10} {r['ratio']:>8.4f}  {ok}")

    print("\nrank selection rule by dataset size:")
    for n in (1_000, 10_000, 50_000, 500_000, 2_000_000):
        print(f"  {n:>9} -> rank {lora.select_rank(n)}")
    print()
    print(json.dumps(all_rows))


if __name__ == "__main__":
    main()
