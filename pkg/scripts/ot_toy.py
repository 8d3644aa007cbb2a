"""Train the Gaussian-to-Gaussian transport toy and compare its action with W2^2.

    python3 scripts/ot_toy.py --seeds 0,1,2 --T 8
"""
import argparse

from dgfamba.ot_toy import train_transport


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--T", type=int, default=8)
    p.add_argument("--iterations", type=int, default=800)
    p.add_argument("--shift", type=float, nargs=2, default=(2.0, 0.0))
    p.add_argument("--std", type=float, default=0.5)
    args = p.parse_args()
    for seed in (int(s) for s in args.seeds.split(",")):
        r = train_transport(shift=tuple(args.shift), std=args.std, T=args.T,
                            iterations=args.iterations, seed=seed)
        print(f"seed {seed}: action {r.action:.4f}  W2^2 {r.w2_squared:.4f}  "
              f"rel. error {r.relative_error:.3f}  end mean {[round(m, 3) for m in r.end_mean]}  "
              f"end std {r.end_std:.3f}")


if __name__ == "__main__":
    main()
