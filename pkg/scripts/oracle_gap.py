"""Urgency signal strength of the simulator, measured with its own ground truth.

For each urgency sensitivity β, compares the expected nDCG@1 of the true click
model against the same model with β forced to zero (an urgency-blind oracle).
"""
import argparse
from dataclasses import replace

import numpy as np

from urgency_rank.simulate import SimConfig, click_logits, generate, log_softmax


def oracle_gap(cfg: SimConfig) -> tuple[float, float, int]:
    ds = generate(cfg)
    full = blind = 0.0
    for s in ds.slates:
        truth = ds.truth[s.user_id]
        p = np.exp(log_softmax(click_logits(truth, s, cfg)))
        full += p[np.argmax(p)]
        blind += p[np.argmax(click_logits(replace(truth, beta=0.0), s, cfg))]
    n = len(ds.slates)
    return full / n, blind / n, n


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--users", type=int, default=1000)
    p.add_argument("--betas", nargs="+", type=float, default=[0.0, 1.0, 2.5, 5.0, 10.0])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    print(f"{'beta':>6} {'aware':>8} {'blind':>8} {'gap':>8} {'slates':>7}")
    for beta in args.betas:
        cfg = SimConfig(seed=args.seed, n_users=args.users, beta_power=(beta, beta), beta_casual=(beta, beta))
        full, blind, n = oracle_gap(cfg)
        print(f"{beta:>6.2f} {full:>8.4f} {blind:>8.4f} {full - blind:>8.4f} {n:>7}")


if __name__ == "__main__":
    main()
