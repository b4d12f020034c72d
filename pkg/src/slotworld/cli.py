"""Command-line entry point: data generation, training, evaluation, diagnostics.

Configuration is a flat key=value text format with section prefixes
(sim.radius=0.08). Defaults cover every key; files load first, then
--set overrides, then dedicated flags. Unknown keys or flags are errors,
never silently dropped. Exit codes: 0 success, 1 validation error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from slotworld import align, evaluate, latents, objective, render, sim
from slotworld import tensor as T
from slotworld.dynamics import DynamicsConfig, DynamicsModel


class ConfigError(ValueError):
    pass


_DEFAULTS: dict[str, object] = {
    "sim.num_balls": 4,
    "sim.num_frames": 20,
    "sim.variant": "Mod1",
    "sim.radius": 0.08,
    "sim.speed": 0.025,
    "model.d_model": 64,
    "model.n_heads": 4,
    "model.n_layers": 3,
    "model.d_ff": 128,
    "model.slots": 8,
    "model.d_what": 5,
    "model.max_shift": 0.2,
    "model.dropout": 0.0,
    "loss.where": 20.0,
    "loss.depth": 0.0,
    "loss.pres": 1.0,
    "loss.what": 4.0,
    "train.lr": 3e-4,
    "train.batch_size": 16,
    "train.total_steps": 2000,
    "train.clip_norm": 1.0,
    "train.eval_interval": 250,
    "train.context": 19,
    "train.stop_accuracy": -1.0,  # negative disables early stopping
    "train.val_limit": 0,  # 0 means use the whole validation split
    "readout.lr": 3e-4,
    "readout.batch_size": 16,
    "readout.total_steps": 1500,
    "readout.clip_norm": 1.0,
    "readout.eval_interval": 100,
    "readout.hard": False,
    "readout.cells": 16,
    "readout.center_weight": 0.0,
    "readout.stop_accuracy": -1.0,
    "readout.val_limit": 0,
    "run.deterministic": False,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw: str, where: str):
    default = _DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        kind = type(default).__name__
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind} for key {key!r}") from None


class RunConfig:
    """Merged flat configuration over every module's knobs."""

    def __init__(self, values: dict[str, object]):
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        values = dict(_DEFAULTS)

        def assign(key: str, raw: str, where: str) -> None:
            if key not in values:
                raise ConfigError(f"{where}: unknown config key {key!r}")
            values[key] = _convert(key, raw, where)

        if path is not None:
            text = Path(path).read_text()
            for lineno, line in enumerate(text.splitlines(), 1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                if "=" not in body:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, raw = (part.strip() for part in body.split("=", 1))
                assign(key, raw, f"{path}:{lineno}")
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, raw = (part.strip() for part in item.split("=", 1))
            assign(key, raw, "--set")
        return cls(values)

    def episode_config(self, seed: int) -> sim.EpisodeConfig:
        wanted = str(self["sim.variant"])
        canon = {v.lower(): v for v in sim.VARIANTS}.get(wanted.lower(), wanted)
        return sim.EpisodeConfig(
            num_balls=self["sim.num_balls"],
            num_frames=self["sim.num_frames"],
            variant=canon,
            radius=self["sim.radius"],
            speed=self["sim.speed"],
            seed=seed,
        )

    def dynamics_config(self) -> DynamicsConfig:
        return DynamicsConfig(
            d_model=self["model.d_model"],
            n_heads=self["model.n_heads"],
            n_layers=self["model.n_layers"],
            d_ff=self["model.d_ff"],
            slots=self["model.slots"],
            d_what=self["model.d_what"],
            max_shift=self["model.max_shift"],
            dropout=self["model.dropout"],
        )

    def loss_weights(self) -> objective.LossWeights:
        return objective.LossWeights(
            where=self["loss.where"],
            depth=self["loss.depth"],
            pres=self["loss.pres"],
            what=self["loss.what"],
        )

    def train_config(self, seed: int, deterministic: bool) -> objective.TrainConfig:
        stop = self["train.stop_accuracy"]
        limit = self["train.val_limit"]
        return objective.TrainConfig(
            lr=self["train.lr"],
            batch_size=self["train.batch_size"],
            total_steps=self["train.total_steps"],
            clip_norm=self["train.clip_norm"],
            seed=seed,
            eval_interval=self["train.eval_interval"],
            context=self["train.context"],
            stop_accuracy=None if stop < 0 else stop,
            val_limit=None if limit <= 0 else limit,
            deterministic=deterministic,
        )

    def readout_config(self, seed: int, deterministic: bool) -> objective.ReadoutConfig:
        stop = self["readout.stop_accuracy"]
        limit = self["readout.val_limit"]
        return objective.ReadoutConfig(
            lr=self["readout.lr"],
            batch_size=self["readout.batch_size"],
            total_steps=self["readout.total_steps"],
            clip_norm=self["readout.clip_norm"],
            seed=seed,
            eval_interval=self["readout.eval_interval"],
            hard=self["readout.hard"],
            cells=self["readout.cells"],
            center_weight=self["readout.center_weight"],
            stop_accuracy=None if stop < 0 else stop,
            val_limit=None if limit <= 0 else limit,
            deterministic=deterministic,
        )


# -- shared helpers ------------------------------------------------------------


def _run_config(args) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None), getattr(args, "set", None))


def _deterministic(args, run: RunConfig) -> bool:
    return bool(getattr(args, "deterministic", False) or run["run.deterministic"])


def _load_episodes(args, split: str | None = None, limit: int | None = None):
    split = split or args.split
    episodes = sim.load_split(args.data, split, limit=limit)
    if not episodes:
        raise ConfigError(f"split {split!r} in {args.data} holds no episodes")
    return episodes


def _load_model(path) -> DynamicsModel:
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return DynamicsModel.load(path)


def _encode_for(model: DynamicsModel, episodes) -> list[np.ndarray]:
    cfg = model.config
    return [latents.encode_episode(ep, cfg.slots, cfg.d_what) for ep in episodes]


def _chunked(items, jobs: int) -> list[list]:
    jobs = max(1, min(jobs, len(items)))
    bounds = np.linspace(0, len(items), jobs + 1).astype(int)
    return [items[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def _map_jobs(jobs: int, fn, chunks: list):
    # deterministic reduction: results keep submission order
    if jobs <= 1 or len(chunks) <= 1:
        return [fn(chunk) for chunk in chunks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return [future.result() for future in [pool.submit(fn, c) for c in chunks]]


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    run = _run_config(args)
    overrides = {
        "sim.variant": args.variant,
        "sim.num_balls": args.balls,
        "sim.num_frames": args.frames,
    }
    for key, value in overrides.items():
        if value is not None:
            run.values[key] = _convert(key, str(value), "flag")
    config = run.episode_config(seed=args.seed)
    manifest = sim.generate_dataset(
        config,
        n_train=args.train,
        n_val=args.val,
        n_test=args.test,
        out_dir=args.out,
        master_seed=args.seed,
        jobs=args.jobs,
    )
    counts = {split: info["count"] for split, info in manifest["splits"].items()}
    print(f"wrote {args.out}: {counts}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    deterministic = _deterministic(args, run)
    train_eps = _load_episodes(args, "train")
    val_eps = sim.load_split(args.data, "val")
    model = (
        _load_model(args.ckpt)
        if args.ckpt
        else DynamicsModel(run.dynamics_config(), seed=args.seed)
    )
    config = run.train_config(seed=args.seed, deterministic=deterministic)
    summary = objective.train(
        model, train_eps, val_eps, config, weights=run.loss_weights(), out_dir=args.out
    )
    if summary["history"]:
        last = summary["history"][-1]
        print(f"{last['step']},{last['loss']:.6f},{last['accuracy']:.6f}")
    print(f"checkpoints in {args.out}")
    return 0


def cmd_train_readout(args) -> int:
    run = _run_config(args)
    deterministic = _deterministic(args, run)
    train_eps = _load_episodes(args, "train")
    val_eps = sim.load_split(args.data, "val")
    model = _load_model(args.ckpt)
    config = run.readout_config(seed=args.seed, deterministic=deterministic)
    summary = objective.train_readout(model, train_eps, val_eps, config, out_dir=args.out)
    if summary["history"]:
        last = summary["history"][-1]
        print(f"{last['step']},{last['loss']:.6f},{last['top1']:.6f}")
    print(f"checkpoints in {args.out}")
    return 0


def cmd_rollout(args) -> int:
    model = _load_model(args.ckpt)
    episodes = _load_episodes(args)
    if not 0 <= args.episode < len(episodes):
        raise ConfigError(f"episode index {args.episode} outside the {len(episodes)} available")
    ep = episodes[args.episode]
    seq = latents.encode_episode(ep, model.config.slots, model.config.d_what)
    if args.context < 1 or args.context + (args.gen if args.forced else 0) > len(seq):
        raise ConfigError(
            f"context {args.context} with {args.gen} forced steps does not fit {len(seq)} frames"
        )
    forced = seq[args.context : args.context + args.gen] if args.forced else None
    rolled = model.rollout(seq[: args.context], args.gen, forced_latents=forced)
    latents.write_latents(args.out, rolled.astype(np.float32))
    print(f"wrote {args.out}: {rolled.shape[0]} frames ({args.context} context + {args.gen} generated)")
    if args.render_dir:
        frames = [latents.analytic_decode(frame, args.resolution) for frame in rolled]
        paths = render.write_frame_sequence(args.render_dir, frames)
        print(f"rendered {len(paths)} frames to {args.render_dir}")
    return 0


def cmd_eval_next_step(args) -> int:
    model = _load_model(args.ckpt)
    episodes = _load_episodes(args, limit=args.limit or None)
    seqs = _encode_for(model, episodes)
    pairs = list(zip(episodes, seqs))

    def count(chunk):
        eps, ss = zip(*chunk)
        return evaluate.next_step_counts(model, list(eps), list(ss), batch_size=args.batch_size)

    parts = _map_jobs(args.jobs, count, _chunked(pairs, args.jobs))
    correct = sum(p[0] for p in parts)
    total = sum(p[1] for p in parts)
    accuracy = correct / total if total else 0.0
    print(f"next-step change accuracy {accuracy:.6f} ({correct}/{total} events)")
    return 0


def cmd_eval_gen(args) -> int:
    model = _load_model(args.ckpt)
    episodes = _load_episodes(args, limit=args.limit or None)
    seqs = _encode_for(model, episodes)
    pairs = list(zip(episodes, seqs))

    def curves(chunk):
        eps, ss = zip(*chunk)
        med = evaluate.med_curve(model, list(eps), args.context, args.gen, list(ss), args.batch_size)
        mse = evaluate.pixel_mse_curve(
            model, list(eps), args.context, args.gen, list(ss), args.batch_size
        )
        return med * len(eps), mse * len(eps)

    parts = _map_jobs(args.jobs, curves, _chunked(pairs, args.jobs))
    med = sum(p[0] for p in parts) / len(episodes)
    mse = sum(p[1] for p in parts) / len(episodes)
    if args.csv:
        evaluate.write_curves(args.csv, {"med": med, "pixel_mse": mse})
        print(f"wrote {args.csv}")
    print(f"med horizon1 {med[0]:.6f} horizon{args.gen} {med[-1]:.6f}; pixel mse final {mse[-1]:.6f}")
    return 0


def cmd_eval_forced(args) -> int:
    model = _load_model(args.ckpt)
    episodes = _load_episodes(args, limit=args.limit or None)
    seqs = _encode_for(model, episodes)
    pairs = list(zip(episodes, seqs))

    def counts(chunk):
        eps, ss = zip(*chunk)
        cum, totals = evaluate.forced_generation_accuracy(
            model, list(eps), args.context, args.gen, list(ss), args.batch_size
        )
        # undo the per-chunk cumulative ratio to recover raw counts
        cum_total = np.cumsum(totals)
        hits = np.where(cum_total > 0, np.nan_to_num(cum) * cum_total, 0.0)
        per_step = np.diff(hits, prepend=0.0)
        return per_step, totals

    parts = _map_jobs(args.jobs, counts, _chunked(pairs, args.jobs))
    correct = sum(p[0] for p in parts)
    totals = sum(p[1] for p in parts)
    cum_c, cum_t = np.cumsum(correct), np.cumsum(totals)
    cumulative = np.full(args.gen, np.nan)
    seen = cum_t > 0
    cumulative[seen] = cum_c[seen] / cum_t[seen]
    if args.csv:
        evaluate.write_curves(args.csv, {"forced_cumulative": cumulative, "events": totals})
        print(f"wrote {args.csv}")
    final = cumulative[-1] if seen.any() else float("nan")
    print(f"forced cumulative accuracy at horizon {args.gen}: {final:.6f} ({int(cum_t[-1])} events)")
    return 0


def cmd_eval_readout(args) -> int:
    model = _load_model(args.ckpt)
    if model.config.readout_cells <= 0:
        raise ConfigError(f"checkpoint {args.ckpt} has no readout head")
    episodes = _load_episodes(args, limit=args.limit or None)
    report = evaluate.readout_eval(model, episodes, hard=args.hard, batch_size=args.batch_size)
    print(
        f"readout top1 {report.top1:.6f} top5 {report.top5:.6f} "
        f"grid-l1 {report.grid_l1:.6f} on {report.count} episodes"
    )
    return 0


def cmd_grad_check(args) -> int:
    run = _run_config(args)
    cfg = run.dynamics_config()
    model = DynamicsModel(cfg, seed=args.seed, dtype=np.float64)
    rng = np.random.default_rng(args.seed)
    batch = rng.uniform(0.0, 1.0, size=(args.batch, args.frames, cfg.slots, cfg.slot_dim))
    batch[..., latents.PRES] = (batch[..., latents.PRES] > 0.5).astype(np.float64)
    heads = model.forward_predict(batch[:, :-1])
    # alignment frozen at the expansion point keeps the loss differentiable
    aligned = align.align_latents(heads["pres"].values, heads["where"].values, batch[:, 1:])
    weights = run.loss_weights()

    def fn():
        return objective.object_loss(model.forward_predict(batch[:, :-1]), aligned, weights)

    worst, name = T.grad_check(fn, model.store, eps=args.eps)
    print(f"max relative error {worst:.6e} at {name}")
    return 0 if worst < args.tol else 1


def cmd_dump_attn(args) -> int:
    model = _load_model(args.ckpt)
    episodes = _load_episodes(args)
    if not 0 <= args.episode < len(episodes):
        raise ConfigError(f"episode index {args.episode} outside the {len(episodes)} available")
    rows = evaluate.dump_attention(
        model, episodes[args.episode], layer=args.layer, timestep=args.timestep, path=args.csv
    )
    print(f"wrote {args.csv}: {rows} rows")
    return 0


def cmd_render(args) -> int:
    episodes = _load_episodes(args)
    if not 0 <= args.episode < len(episodes):
        raise ConfigError(f"episode index {args.episode} outside the {len(episodes)} available")
    ep = episodes[args.episode]
    frames = [
        render.rasterize([ep.ball(t, o) for o in range(ep.num_balls)], args.resolution)
        for t in range(ep.num_frames)
    ]
    paths = render.write_frame_sequence(args.out, frames)
    print(f"rendered {len(paths)} frames to {args.out}")
    return 0


# -- parser ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; validation errors are 1
        raise ConfigError(message)


def _add_config_flags(p) -> None:
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, default=0, help="master seed for all randomness")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slotworld", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate and write an episode dataset")
    _add_config_flags(p)
    p.add_argument("--variant", default=None, help="color rule: Mod1, Mod2, Mod3 or Mod1234")
    p.add_argument("--balls", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--val", type=int, default=100)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the dynamics model")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", default=None, help="resume from an existing checkpoint")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-readout", help="fine-tune the CLS readout head")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="pretrained dynamics checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train_readout)

    p = sub.add_parser("rollout", help="autoregressively continue one episode")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--episode", type=int, default=0)
    p.add_argument("--context", type=int, default=10)
    p.add_argument("--gen", type=int, default=40)
    p.add_argument("--forced", action="store_true", help="pin generated boxes to the truth")
    p.add_argument("--out", required=True, help="output latent-sequence file")
    p.add_argument("--render-dir", default=None, help="also render decoded frames here")
    p.add_argument("--resolution", type=int, default=render.DEFAULT_RESOLUTION)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval-next-step", help="change accuracy of next-frame predictions")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--limit", type=int, default=0, help="cap the episode count (0 = all)")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval_next_step)

    p = sub.add_parser("eval-gen", help="free-generation MED and pixel-MSE curves")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--context", type=int, default=10)
    p.add_argument("--gen", type=int, default=40)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval_gen)

    p = sub.add_parser("eval-forced", help="cumulative change accuracy, positions forced")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--context", type=int, default=10)
    p.add_argument("--gen", type=int, default=40)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval_forced)

    p = sub.add_parser("eval-readout", help="CLS readout cell accuracy")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--hard", action="store_true", help="withhold the last 20%% of frames")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_eval_readout)

    p = sub.add_parser("grad-check", help="finite-difference check of the taped gradients")
    _add_config_flags(p)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--frames", type=int, default=4)
    # step balances truncation against float64 cancellation at this loss scale
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-attn", help="write head-averaged attention weights as CSV")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--episode", type=int, default=0)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--timestep", type=int, default=0)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("render", help="rasterize a stored episode to image files")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--episode", type=int, default=0)
    p.add_argument("--resolution", type=int, default=render.DEFAULT_RESOLUTION)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.func(args) or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary: runtime failures exit 2
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
