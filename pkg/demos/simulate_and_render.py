"""Simulate one bouncing-ball episode and write its frames as PPM images."""

import argparse

from slotworld import render, sim


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--variant", default="Mod1")
    ap.add_argument("--balls", type=int, default=4)
    ap.add_argument("--frames", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="demo_out/episode")
    args = ap.parse_args()

    config = sim.EpisodeConfig(
        num_balls=args.balls, num_frames=args.frames, variant=args.variant, seed=args.seed
    )
    ep = sim.generate_episode(config)

    frames = [
        render.rasterize([ep.ball(t, o) for o in range(ep.num_balls)])
        for t in range(ep.num_frames)
    ]
    paths = render.write_frame_sequence(args.out, frames)
    print(f"wrote {len(paths)} frames to {args.out}")

    names = {sim.KIND_BALL: "ball", sim.KIND_WALL: "wall"}
    for ev in ep.events:
        extra = f"partner={ev.partner} color={ev.partner_color}" if ev.kind == sim.KIND_BALL else f"wall={ev.wall}"
        print(f"frame {ev.frame:3d}  ball {ev.subject}  {names[ev.kind]}  {extra}")
    changes = sum(
        int(c) for t in range(1, ep.num_frames) for c in ep.colors(t) != ep.colors(t - 1)
    )
    print(f"{changes} color changes over {ep.num_frames} frames")


if __name__ == "__main__":
    main()
