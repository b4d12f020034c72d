"""Roll a trained model forward and score the generation against the truth."""

import argparse

import numpy as np

from slotworld import evaluate, latents, render, sim
from slotworld.dynamics import DynamicsModel


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ckpt", default="demo_out/run/best.ckpt")
    ap.add_argument("--context", type=int, default=10)
    ap.add_argument("--gen", type=int, default=20)
    ap.add_argument("--episodes", type=int, default=16)
    ap.add_argument("--seed", type=int, default=123)
    ap.add_argument("--render-out", default="demo_out/rollout")
    args = ap.parse_args()

    model = DynamicsModel.load(args.ckpt)
    cfg = sim.EpisodeConfig(
        num_balls=4, num_frames=args.context + args.gen, variant="Mod1", seed=args.seed
    )
    episodes = []
    for i in range(args.episodes):
        episodes.append(sim.generate_episode(
            sim.EpisodeConfig(
                num_balls=cfg.num_balls, num_frames=cfg.num_frames,
                variant=cfg.variant, seed=args.seed + i,
            )
        ))
    seqs = [latents.encode_episode(e, model.config.slots, model.config.d_what) for e in episodes]

    med = evaluate.med_curve(model, episodes, args.context, args.gen, seqs)
    mse = evaluate.pixel_mse_curve(model, episodes, args.context, args.gen, seqs)
    blank = evaluate.blank_pixel_mse(episodes)
    print("horizon  med      pixel_mse")
    for s in range(0, args.gen, max(1, args.gen // 10)):
        print(f"{s + 1:7d}  {med[s]:.4f}   {mse[s]:.4f}")
    print(f"blank-image pixel MSE (reference): {blank:.4f}")

    # side-by-side frames for the first episode: truth, then prediction
    rolled = model.rollout(seqs[0][: args.context], args.gen)
    frames = []
    for t in range(args.context, args.context + args.gen):
        truth = render.rasterize([episodes[0].ball(t, o) for o in range(episodes[0].num_balls)])
        pred = latents.analytic_decode(rolled[t])
        combo = np.concatenate([truth.pixels, pred.pixels], axis=1)
        frames.append(render.Frame(pixels=combo))
    paths = render.write_frame_sequence(args.render_out, frames)
    print(f"wrote {len(paths)} truth|prediction frames to {args.render_out}")


if __name__ == "__main__":
    main()
