"""Segments with one clean frame among noisy ones: mean attention on the clean frame before and after training."""
import argparse

from setpool.experiments import attention_shift_run


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--length", type=int, default=5)
    args = p.parse_args()
    for s in args.seeds:
        r = attention_shift_run(s, steps=args.steps, length=args.length)
        print(f"seed {s}: before {r['before']:.3f}  after {r['after']:.3f}  uniform {r['uniform']:.3f}")


if __name__ == "__main__":
    main()
