"""Compare clean and poisoned ridge test loss over a range of budgets and seeds."""

import argparse

from optlayer.experiments import PoisonConfig, run_poison


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    print(f"{'seed':>4} {'eps':>6} {'clean':>10} {'poisoned':>10}")
    for seed in range(args.seeds):
        for eps in (0.0, 0.02, 0.05, 0.1):
            m = run_poison(PoisonConfig(seed=seed, epsilon=eps))
            print(f"{seed:>4} {eps:>6.2f} {m['clean_test_loss']:>10.5f} "
                  f"{m['poisoned_test_loss']:>10.5f}")


if __name__ == "__main__":
    main()
