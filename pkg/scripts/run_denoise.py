"""Train the TV regularization weight on seeded synthetic signals and print metrics."""

import argparse
import json

from optlayer.experiments import DenoiseConfig, dumps, run_denoise


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--iterations", type=int, default=25)
    ap.add_argument("--learn-d", action="store_true")
    args = ap.parse_args()
    cfg = DenoiseConfig(seed=args.seed, sigma=args.sigma, iterations=args.iterations,
                        learn_d=args.learn_d)
    m = run_denoise(cfg)
    summary = {k: m[k] for k in ("baseline_test_mse", "initial_test_mse", "final_test_mse",
                                 "initial_lambda", "final_lambda")}
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.learn_d:
        print(dumps({"operator_change": m["operator_change"]}))


if __name__ == "__main__":
    main()
