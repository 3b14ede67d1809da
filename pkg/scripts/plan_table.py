"""Print the KV-cache size table for every shipped model config.

Usage: python3 scripts/plan_table.py [--seq-lens 4096,32768,131072,1048576]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from kvq.planner import model_config, plan_grid, render_table

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SCHEMES = ["fp16", "nuq4", "nuq4-1%", "nuq3-1%", "nuq2-1%"]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seq-lens", default="4096,32768,131072,1048576")
    args = ap.parse_args()
    seq_lens = [int(s) for s in args.seq_lens.split(",")]
    for path in sorted(CONFIGS.glob("*.json")):
        base = model_config(json.loads(path.read_text()))
        print(f"\n{path.stem}  (layers={base.n_layers}, heads={base.n_heads}, head_dim={base.head_dim})")
        print(render_table(plan_grid(base, SCHEMES, seq_lens)))


if __name__ == "__main__":
    main()
