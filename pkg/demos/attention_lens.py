"""Dump attention weights around an interaction and summarize where they point."""

import argparse
import csv
from collections import defaultdict

from slotworld import evaluate, sim
from slotworld.dynamics import DynamicsModel


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ckpt", default="demo_out/run/best.ckpt")
    ap.add_argument("--layer", type=int, default=2)
    ap.add_argument("--seed", type=int, default=5)
    ap.add_argument("--csv", default="demo_out/attention.csv")
    args = ap.parse_args()

    model = DynamicsModel.load(args.ckpt)
    ep = sim.generate_episode(
        sim.EpisodeConfig(num_balls=4, num_frames=20, variant="Mod1", seed=args.seed)
    )
    # query at the last ball-ball contact so history attention has a target
    contacts = [e.frame for e in ep.events if e.kind == sim.KIND_BALL]
    timestep = contacts[-1] if contacts else ep.num_frames - 1
    rows = evaluate.dump_attention(model, ep, layer=args.layer, timestep=timestep, path=args.csv)
    print(f"wrote {rows} rows for layer {args.layer}, timestep {timestep} -> {args.csv}")

    mass = defaultdict(float)
    with open(args.csv, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["query_ball"] == "-1":
                continue
            same = row["key_ball"] == row["query_ball"]
            mass["self" if same else "other"] += float(row["weight"])
    total = sum(mass.values()) or 1.0
    for key in ("self", "other"):
        print(f"attention mass on {key} tokens: {mass[key] / total:.3f}")


if __name__ == "__main__":
    main()
