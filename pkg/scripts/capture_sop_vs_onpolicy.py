#!/usr/bin/env python3
"""Sample-efficiency comparison: semi-on-policy vs pure on-policy training.

Trains the state-value-critic algorithm on the pursuit grid in both modes
with the same environment-step budget and reports, per mode, the median
test return across seeds. The semi-on-policy runs perform a training update
per sampled episode instead of per batch of fresh episodes, which is where
the sample-efficiency gain comes from.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from sopac.harness import RunConfig, run_experiment


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/capture")
    parser.add_argument("--seeds", type=int, default=4)
    parser.add_argument("--total-steps", type=int, default=24000)
    parser.add_argument("--side", type=int, default=5)
    args = parser.parse_args()

    out = Path(args.out)
    curves: dict[str, list] = {}
    for sop in ("off", "permissive"):
        rows_per_seed = []
        for seed in range(args.seeds):
            cfg = RunConfig(
                env="capture", algo="centralv", sop=sop, batch_size=8,
                total_steps=args.total_steps, eval_interval=2000,
                eval_episodes=16, eps_anneal_steps=15000, seed=seed,
                env_config={"side": args.side, "horizon": 20, "prey": "static"},
            )
            result = run_experiment(cfg, out / sop / f"seed{seed}")
            rows_per_seed.append(result.rows)
            print(f"{sop} seed {seed}: final return {result.rows[-1]['test_return']:.2f}")
        curves[sop] = rows_per_seed

    print("\nmedian test return by environment-step budget:")
    print(f"{'step':>8} {'on-policy':>10} {'semi-on-policy':>15}")
    for i, row in enumerate(curves["off"][0]):
        med_off = np.median([rows[i]["test_return"] for rows in curves["off"]])
        med_sop = np.median([rows[i]["test_return"] for rows in curves["permissive"]])
        print(f"{row['step']:>8} {med_off:>10.2f} {med_sop:>15.2f}")


if __name__ == "__main__":
    main()
