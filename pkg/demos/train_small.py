"""Train a small dynamics model end to end and report next-step accuracy.

Writes checkpoints to demo_out/run; the rollout and attention demos pick
them up from there. A few hundred steps is enough to see the loss move,
though color-change accuracy needs a much longer desk-scale run.
"""

import argparse
import time

from slotworld import evaluate, latents, objective, sim
from slotworld.dynamics import DynamicsConfig, DynamicsModel


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--train-episodes", type=int, default=200)
    ap.add_argument("--val-episodes", type=int, default=40)
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="demo_out/run")
    args = ap.parse_args()

    config = sim.EpisodeConfig(num_balls=4, num_frames=20, variant="Mod1")
    sim.generate_dataset(
        config, args.train_episodes, args.val_episodes, 0, "demo_out/data", master_seed=args.seed
    )
    train_eps = sim.load_split("demo_out/data", "train")
    val_eps = sim.load_split("demo_out/data", "val")

    model = DynamicsModel(DynamicsConfig(slots=8), seed=args.seed)
    tc = objective.TrainConfig(
        total_steps=args.steps, eval_interval=max(1, args.steps // 4), context=19, seed=args.seed
    )
    t0 = time.perf_counter()
    summary = objective.train(model, train_eps, val_eps, tc, out_dir=args.out)
    print(f"trained {args.steps} steps in {time.perf_counter() - t0:.0f}s")
    for row in summary["history"]:
        print(f"  step {row['step']:5d}  loss {row['loss']:.4f}  val acc {row['accuracy']:.3f}")

    best = DynamicsModel.load(f"{args.out}/best.ckpt")
    seqs = [latents.encode_episode(e, 8, 5) for e in val_eps]
    correct, total = evaluate.next_step_counts(best, val_eps, seqs)
    print(f"next-step change accuracy: {correct}/{total}")
    print(f"checkpoints in {args.out}")


if __name__ == "__main__":
    main()
