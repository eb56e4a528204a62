"""Profile-only probes: rank-1 of plain DAC against DAC with parameter-free and metric-learning pose grouping."""
import argparse

import numpy as np

from setpool.experiments import pgr_run

MODES = ("none", "parameter_free", "metric_learning")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--pose-offset-scale", type=float, default=0.4)
    p.add_argument("--mlpgr-steps", type=int, default=200)
    p.add_argument("--normalize-masses", action="store_true", help="divide pose-group masses by the total weight")
    args = p.parse_args()

    runs = [pgr_run(s, args.episodes, args.pose_offset_scale, args.mlpgr_steps, args.normalize_masses)
            for s in args.seeds]
    for r in runs:
        print(f"seed {r['seed']}: " + "  ".join(f"{m}={r[m]:.3f}" for m in MODES))
    print("median: " + "  ".join(f"{m}={np.median([r[m] for r in runs]):.3f}" for m in MODES))


if __name__ == "__main__":
    main()
