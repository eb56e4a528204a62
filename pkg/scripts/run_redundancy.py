"""Train on the redundancy benchmark and compare pooling baselines, binary actions and early termination."""
import argparse
import json

import numpy as np

from setpool.experiments import redundancy_run

KEYS = ["meanpool_rank1", "maxpool_rank1", "dac_rank1", "dac-binary_rank1", "dac_head_acc", "meanpool_head_acc",
        "dup_weight", "src_weight", "full_traversed", "term_traversed", "term_rank1", "ma_first", "ma_last", "seconds"]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--algorithm", choices=["on", "off"], default="on")
    p.add_argument("--threshold", type=float, default=0.5, help="softmax termination threshold")
    p.add_argument("--json", help="write per-seed results here")
    args = p.parse_args()

    runs = []
    for s in args.seeds:
        r = redundancy_run(s, args.episodes, args.algorithm, args.threshold)
        runs.append(r)
        print(f"seed {s}: " + "  ".join(f"{k}={r[k]:.3f}" for k in KEYS))
    print("mean:   " + "  ".join(f"{k}={np.mean([r[k] for r in runs]):.3f}" for k in KEYS))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(runs, fh, indent=2)


if __name__ == "__main__":
    main()
