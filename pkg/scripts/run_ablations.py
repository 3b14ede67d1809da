"""Run the ablation orderings and the mixed-precision check over several seeds.

Usage: python3 scripts/run_ablations.py [--seeds 5] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import time

from kvq.simulator import ORDERING_SIM, make_task, mixed_precision_errors, ordering_errors, with_grads


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--json", default=None, help="also write per-seed errors here")
    args = ap.parse_args()

    t0 = time.perf_counter()
    rows: dict[str, list[tuple[float, float]]] = {}
    for seed in range(args.seeds):
        model, data = make_task(seed, ORDERING_SIM)
        data = with_grads(model, data, seed=seed)
        pairs = ordering_errors(model, data)
        pairs["mixed_precision_vs_inverse"] = mixed_precision_errors(model, data)
        for name, pair in pairs.items():
            rows.setdefault(name, []).append(pair)

    print(f"{'ordering':<30}{'holds':>7}   per-seed (better / worse)")
    for name, pairs in rows.items():
        held = sum(a <= b for a, b in pairs)
        cells = "  ".join(f"{a:.4f}/{b:.4f}" for a, b in pairs)
        print(f"{name:<30}{held:>4}/{len(pairs)}   {cells}")
    print(f"{time.perf_counter() - t0:.0f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
