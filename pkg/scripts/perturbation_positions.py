"""LQ cost and stabilizing time for uniform vs platoon AVs, perturbing each vehicle in turn."""
import argparse
from dataclasses import replace

from ringform.sim import PLATOON_40_8, UNIFORM_40_8, ScenarioConfig, perturbation_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0, help="heterogeneity draw")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    cfg = ScenarioConfig(rng_seed=args.seed)
    uni = perturbation_sweep(replace(cfg, formation=UNIFORM_40_8), threads=args.threads)
    pla = perturbation_sweep(replace(cfg, formation=PLATOON_40_8), threads=args.threads)
    print(f"{'vehicle':>7} {'lq uniform':>11} {'lq platoon':>11} {'t_s uniform':>12} {'t_s platoon':>12}")
    wins = 0
    for (v, mu, _), (_, mp, _) in zip(uni, pla):
        wins += mu.lq_cost < mp.lq_cost
        print(f"{v:>7} {mu.lq_cost:>11.1f} {mp.lq_cost:>11.1f} {mu.stabilizing_time:>12.2f} {mp.stabilizing_time:>12.2f}")
    print(f"uniform cheaper at {wins}/{len(uni)} positions")


if __name__ == "__main__":
    main()
