"""Episodes needed by on- and off-policy training to reach 90% of the on-policy converged reward."""
import argparse
import csv

import numpy as np

from setpool.experiments import sample_efficiency_run
from setpool.training import moving_average


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--curves", help="write 100-episode moving averages per seed and algorithm to this CSV")
    args = p.parse_args()

    runs = [sample_efficiency_run(s, args.episodes) for s in args.seeds]
    for r in runs:
        print(f"seed {r['seed']}: threshold {r['threshold']:.4f}  on {r['on_episodes']}  off {r['off_episodes']}  "
              f"ratio {r['ratio']:.2f}")
    print(f"median ratio {np.median([r['ratio'] for r in runs]):.2f}")
    if args.curves:
        with open(args.curves, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "algorithm", "episode", "moving_average"])
            for r in runs:
                for algo, rewards in r["curves"].items():
                    for i, v in enumerate(moving_average(rewards), start=100):
                        w.writerow([r["seed"], algo, i, repr(float(v))])


if __name__ == "__main__":
    main()
