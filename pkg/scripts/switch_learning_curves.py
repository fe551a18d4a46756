#!/usr/bin/env python3
"""Learning curves on the one-shot coordination game.

Runs every algorithm with semi-on-policy training across seeds, then folds
the per-seed metrics into median/quartile curves. Results land under
results/switch/<algo>/seed<k>/ with one aggregate CSV per algorithm.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from sopac.harness import RunConfig, aggregate, run_experiment, write_aggregate


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/switch")
    parser.add_argument("--seeds", type=int, default=4)
    parser.add_argument("--total-steps", type=int, default=8000)
    args = parser.parse_args()

    out = Path(args.out)
    for algo in ("centralv", "coma", "coma-cc"):
        run_dirs = []
        for seed in range(args.seeds):
            cfg = RunConfig(
                env="switch", algo=algo, sop="permissive", batch_size=8,
                total_steps=args.total_steps, eval_interval=250,
                eval_episodes=32, seed=seed,
            )
            result = run_experiment(cfg, out / algo / f"seed{seed}")
            run_dirs.append(result.metrics_path)
            final = result.rows[-1]
            print(f"{algo} seed {seed}: win rate {final['test_win_rate']:.2f} "
                  f"after {final['episodes']} episodes")
        write_aggregate(out / f"{algo}_aggregate.csv", aggregate(run_dirs))
        print(f"wrote {out / f'{algo}_aggregate.csv'}")


if __name__ == "__main__":
    main()
