"""Train the four ablation variants on a simulated dataset and print the table.

    python scripts/run_ablation.py --config configs/acceptance.json --out runs/ablation
    python scripts/run_ablation.py --config configs/acceptance.json --blind --variants full no_urgency
"""
import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from urgency_rank.config import RunConfig, load_run_config
from urgency_rank.simulate import generate, split_dataset
from urgency_rank.train import VARIANTS, run_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", help="RunConfig JSON (defaults apply when omitted)")
    p.add_argument("--out", help="directory for ablation.json")
    p.add_argument("--blind", action="store_true", help="set every user's urgency sensitivity to zero")
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    p.add_argument("--seeds", nargs="+", type=int, help="override the config's ablation seeds")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_run_config(args.config) if args.config else RunConfig()
    sim = cfg.sim
    if args.blind:
        sim = replace(sim, beta_power=(0.0, 0.0), beta_casual=(0.0, 0.0))
    seeds = tuple(args.seeds) if args.seeds else cfg.ablation.seeds

    t0 = time.perf_counter()
    ds = generate(sim)
    train, val, test = split_dataset(ds.slates, sim)
    print(f"slates: train {len(train)}  val {len(val)}  test {len(test)}  ({time.perf_counter() - t0:.0f}s)")
    table = run_ablation(train, val, test, cfg.model, cfg.train, seeds=seeds, variants=args.variants,
                         max_steps=cfg.ablation.max_steps)
    print(table.format())
    for v in table.rows:
        print(f"{v:<12} nDCG@1 per seed: {[round(r['ndcg@1'], 4) for r in table.per_seed[v]]}")
    print(f"total {time.perf_counter() - t0:.0f}s")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps({**table.to_dict(), "blind": args.blind}, indent=2) + "\n")


if __name__ == "__main__":
    main()
