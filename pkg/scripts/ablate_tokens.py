"""Pseudo-token count sweep on the toy world, laid out as one row per k.

    python3 scripts/ablate_tokens.py --k 1 2 4 8 --steps 1000
"""
import argparse

import torch

from cirlab.evaluation import evaluate, format_table
from cirlab.model import ModelConfig
from cirlab.toyworld import ToyWorldConfig, build_toy_world
from cirlab.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--k", type=int, nargs="+", default=list(range(1, 9)))
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    world = build_toy_world(ToyWorldConfig(seed=args.seed))
    rows = []
    for k in args.k:
        res = train(world.unlabeled, world.triplet_set(), world.encoders,
                    TrainConfig(steps=args.steps, learning_rate=1e-3, temperature=0.05,
                                seed=args.seed), ModelConfig(token_count=k))
        rows.append((str(k), evaluate(res.net, world.encoders, world.eval_queries,
                                      world.eval_gallery, world.eval_references)))
        print(f"k={k} done", flush=True)
    print(format_table(rows, label="k"))


if __name__ == "__main__":
    main()
