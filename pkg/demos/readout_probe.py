"""Fine-tune a CLS readout to name the grid cell a ball ends up in."""

import argparse

from slotworld import evaluate, objective, sim
from slotworld.dynamics import DynamicsModel


def one_ball_episodes(n, frames, first_seed):
    return [
        sim.generate_episode(
            sim.EpisodeConfig(num_balls=1, num_frames=frames, variant="Mod1", seed=first_seed + i)
        )
        for i in range(n)
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ckpt", default="demo_out/run/best.ckpt")
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--hard", action="store_true")
    ap.add_argument("--out", default="demo_out/readout")
    args = ap.parse_args()

    model = DynamicsModel.load(args.ckpt)
    train_eps = one_ball_episodes(200, 20, first_seed=3000)
    val_eps = one_ball_episodes(50, 20, first_seed=8000)

    config = objective.ReadoutConfig(
        total_steps=args.steps,
        eval_interval=max(1, args.steps // 4),
        hard=args.hard,
        center_weight=0.5,
    )
    summary = objective.train_readout(model, train_eps, val_eps, config, out_dir=args.out)
    for row in summary["history"]:
        print(f"step {row['step']:5d}  loss {row['loss']:.4f}  top1 {row['top1']:.3f}")

    best = DynamicsModel.load(f"{args.out}/best_readout.ckpt")
    report = evaluate.readout_eval(best, val_eps, hard=args.hard)
    chance = 1.0 / 16.0
    print(
        f"top1 {report.top1:.3f}  top5 {report.top5:.3f}  grid L1 {report.grid_l1:.2f}"
        f"  (chance top1 {chance:.3f})"
    )


if __name__ == "__main__":
    main()
