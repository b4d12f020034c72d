"""Rollout metrics: change accuracy, displacement error, pixel error, readout quality."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from slotworld import align, latents, render
from slotworld.dynamics import heads_to_frame

SQRT2 = math.sqrt(2.0)
GRID_SIDE = 4


def _sequences(model, episodes, seqs) -> list[np.ndarray]:
    if seqs is None:
        cfg = model.config
        seqs = [latents.encode_episode(ep, cfg.slots, cfg.d_what) for ep in episodes]
    return [np.asarray(s) for s in seqs]


def _chunks(n: int, size: int):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def _require_frames(seqs, needed: int) -> None:
    short = min((len(s) for s in seqs), default=needed)
    if short < needed:
        raise ValueError(f"episodes have {short} frames but the rollout needs {needed}")


def _change_events(ep, t: int) -> np.ndarray:
    """Balls whose color at frame t differs from frame t - 1."""
    return np.nonzero(ep.colors(t) != ep.colors(t - 1))[0]


# -- next-step change accuracy ----------------------------------------------


def next_step_counts(
    model,
    episodes,
    seqs=None,
    batch_size: int = 16,
    resolution: int = render.DEFAULT_RESOLUTION,
) -> tuple[int, int]:
    """Count correctly recolored balls over every color-change event.

    One block-causal forward per episode scores all next-frame predictions
    at once. The prediction for a change frame is decoded to pixels and the
    patch at the true ball position is classified; a hit means the patch
    reads back the post-change color.
    """
    seqs = _sequences(model, episodes, seqs)
    correct = 0
    total = 0
    for lo, hi in _chunks(len(episodes), batch_size):
        batch = np.stack(seqs[lo:hi])
        heads = model.forward_predict(batch[:, :-1])
        for off, ep in enumerate(episodes[lo:hi]):
            for t in range(1, ep.num_frames):
                movers = _change_events(ep, t)
                if movers.size == 0:
                    continue
                image = latents.analytic_decode(heads_to_frame(heads, t - 1)[off], resolution)
                for o in movers:
                    ball = ep.ball(t, o)
                    seen = render.classify_patch(image, ball.position, ball.radius)
                    correct += int(seen == ball.color)
                    total += 1
    return correct, total


def next_step_accuracy(
    model,
    episodes,
    seqs=None,
    batch_size: int = 16,
    resolution: int = render.DEFAULT_RESOLUTION,
) -> float:
    correct, total = next_step_counts(model, episodes, seqs, batch_size, resolution)
    return correct / total if total else 0.0


# -- free generation ---------------------------------------------------------


def matched_displacement(pred_positions, true_positions) -> float:
    """Mean distance from true object centers to their assigned predictions.

    The assignment pads both sides with dummies: a true center left
    unmatched costs sqrt(2), the worst in-box distance, while spurious
    predictions are free. The optimal total is averaged over true objects.
    """
    preds = np.asarray(pred_positions, dtype=np.float64).reshape(-1, 2)
    truth = np.asarray(true_positions, dtype=np.float64).reshape(-1, 2)
    n_pred, n_true = len(preds), len(truth)
    if n_true == 0:
        return 0.0
    side = n_pred + n_true
    cost = np.zeros((side, side))
    if n_pred:
        cost[:n_pred, :n_true] = np.linalg.norm(preds[:, None] - truth[None, :], axis=-1)
    cost[n_pred:, :n_true] = SQRT2
    perm = align.hungarian(cost)
    return align.assignment_cost(cost, perm) / n_true


def _visible_positions(latent_frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(latent_frame)
    present = frame[:, latents.PRES] > 0.5
    return frame[present][:, latents.WHERE][:, 2:4]


def med_curve(
    model, episodes, n_context: int, n_gen: int, seqs=None, batch_size: int = 8
) -> np.ndarray:
    """Mean matched displacement at each free-generation horizon."""
    seqs = _sequences(model, episodes, seqs)
    _require_frames(seqs, n_context + n_gen)
    totals = np.zeros(n_gen)
    for lo, hi in _chunks(len(episodes), batch_size):
        ctx = np.stack([s[:n_context] for s in seqs[lo:hi]])
        out = model.rollout_batch(ctx, n_gen)
        for off, ep in enumerate(episodes[lo:hi]):
            for s in range(n_gen):
                t = n_context + s
                totals[s] += matched_displacement(
                    _visible_positions(out[off, t]), ep.positions(t)
                )
    return totals / len(episodes)


def pixel_mse_curve(
    model,
    episodes,
    n_context: int,
    n_gen: int,
    seqs=None,
    batch_size: int = 8,
    resolution: int = render.DEFAULT_RESOLUTION,
) -> np.ndarray:
    """Mean pixel MSE between decoded generations and rendered truth."""
    seqs = _sequences(model, episodes, seqs)
    _require_frames(seqs, n_context + n_gen)
    totals = np.zeros(n_gen)
    for lo, hi in _chunks(len(episodes), batch_size):
        ctx = np.stack([s[:n_context] for s in seqs[lo:hi]])
        out = model.rollout_batch(ctx, n_gen)
        for off, ep in enumerate(episodes[lo:hi]):
            for s in range(n_gen):
                t = n_context + s
                pred = latents.analytic_decode(out[off, t], resolution)
                truth = render.rasterize(
                    [ep.ball(t, o) for o in range(ep.num_balls)], resolution
                )
                totals[s] += render.frame_mse(pred, truth)
    return totals / len(episodes)


def blank_pixel_mse(episodes, resolution: int = render.DEFAULT_RESOLUTION) -> float:
    """Pixel MSE of an always-empty predictor against rendered truth."""
    blank = render.blank_frame(resolution)
    total = 0.0
    count = 0
    for ep in episodes:
        for t in range(ep.num_frames):
            truth = render.rasterize([ep.ball(t, o) for o in range(ep.num_balls)], resolution)
            total += render.frame_mse(blank, truth)
            count += 1
    return total / count if count else 0.0


# -- forced generation -------------------------------------------------------


def forced_generation_accuracy(
    model,
    episodes,
    n_context: int,
    n_gen: int,
    seqs=None,
    batch_size: int = 8,
    resolution: int = render.DEFAULT_RESOLUTION,
) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative change accuracy under position-forced generation.

    Returns (cumulative, totals). cumulative[s] scores every change event
    at horizons 1..s+1 together; horizons before the first event are nan.
    totals[s] is the event count at horizon s+1 alone.
    """
    seqs = _sequences(model, episodes, seqs)
    _require_frames(seqs, n_context + n_gen)
    correct = np.zeros(n_gen)
    totals = np.zeros(n_gen)
    for lo, hi in _chunks(len(episodes), batch_size):
        ctx = np.stack([s[:n_context] for s in seqs[lo:hi]])
        forced = np.stack([s[n_context : n_context + n_gen] for s in seqs[lo:hi]])
        out = model.rollout_batch(ctx, n_gen, forced_latents=forced)
        for off, ep in enumerate(episodes[lo:hi]):
            for s in range(n_gen):
                t = n_context + s
                movers = _change_events(ep, t)
                if movers.size == 0:
                    continue
                image = latents.analytic_decode(out[off, t], resolution)
                for o in movers:
                    ball = ep.ball(t, o)
                    seen = render.classify_patch(image, ball.position, ball.radius)
                    correct[s] += int(seen == ball.color)
                    totals[s] += 1
    cum_c = np.cumsum(correct)
    cum_t = np.cumsum(totals)
    cumulative = np.full(n_gen, np.nan)
    seen_any = cum_t > 0
    cumulative[seen_any] = cum_c[seen_any] / cum_t[seen_any]
    return cumulative, totals


# -- attention inspection ----------------------------------------------------


def dump_attention(model, episode, layer: int, timestep: int, path, seq=None) -> int:
    """Write head-averaged attention out of one frame's slots as CSV rows.

    Columns: query_slot, query_ball, key_timestep, key_slot, key_ball,
    weight. Slots are tied back to balls by matching each latent frame to
    a ground-truth encoding; empty or unmatched slots get ball -1.
    """
    cfg = model.config
    if not 0 <= layer < cfg.n_layers:
        raise ValueError(f"layer {layer} outside 0..{cfg.n_layers - 1}")
    if seq is None:
        seq = latents.encode_episode(episode, cfg.slots, cfg.d_what)
    seq = np.asarray(seq)
    if not 0 <= timestep < len(seq):
        raise ValueError(f"timestep {timestep} outside 0..{len(seq) - 1}")
    sink: list[np.ndarray] = []
    model.forward_predict(seq[None], attention_sink=sink)
    avg = sink[layer][0].mean(axis=0)
    k = cfg.slots

    def slot_balls(tau: int) -> np.ndarray:
        truth = latents.oracle_encode(
            [episode.ball(tau, o) for o in range(episode.num_balls)], k, cfg.d_what
        )
        perm = align.hungarian(align.match_cost(seq[tau], truth))
        out = np.full(k, -1, dtype=np.int64)
        for i in range(k):
            if seq[tau, i, latents.PRES] > 0.5 and perm[i] < episode.num_balls:
                out[i] = perm[i]
        return out

    balls_at = [slot_balls(tau) for tau in range(timestep + 1)]
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_slot", "query_ball", "key_timestep", "key_slot", "key_ball", "weight"])
        for i in range(k):
            for tau in range(timestep + 1):
                for j in range(k):
                    weight = avg[timestep * k + i, tau * k + j]
                    writer.writerow(
                        [i, balls_at[timestep][i], tau, j, balls_at[tau][j], f"{weight:.8f}"]
                    )
                    rows += 1
    return rows


# -- readout -----------------------------------------------------------------


def grid_cell(position, side: int = GRID_SIDE) -> int:
    """Row-major cell index of a unit-square position on a side x side grid."""
    ix = min(int(float(position[0]) * side), side - 1)
    iy = min(int(float(position[1]) * side), side - 1)
    return iy * side + ix


def cell_coords(cell: int, side: int = GRID_SIDE) -> tuple[int, int]:
    return cell // side, cell % side


def readout_labels(episodes, side: int = GRID_SIDE) -> np.ndarray:
    """Final-frame grid cell of ball 0, one label per episode."""
    return np.array(
        [grid_cell(ep.positions(ep.num_frames - 1)[0], side) for ep in episodes],
        dtype=np.int64,
    )


def readout_inputs(seqs, hard: bool) -> list[np.ndarray]:
    """Full latent sequences, or only the first 80% of frames when hard."""
    seqs = [np.asarray(s) for s in seqs]
    if not hard:
        return seqs
    return [s[: max(1, int(0.8 * len(s)))] for s in seqs]


@dataclass
class ReadoutReport:
    top1: float
    top5: float
    grid_l1: float
    count: int


def readout_eval(
    model, episodes, hard: bool = False, seqs=None, batch_size: int = 16, side: int = GRID_SIDE
) -> ReadoutReport:
    """Top-1/top-5 cell accuracy and mean Manhattan cell error."""
    seqs = _sequences(model, episodes, seqs)
    inputs = readout_inputs(seqs, hard)
    labels = readout_labels(episodes, side)
    hits1 = 0
    hits5 = 0
    l1 = 0.0
    for lo, hi in _chunks(len(episodes), batch_size):
        batch = np.stack(inputs[lo:hi])
        logits = model.readout(batch)[0].values
        order = np.argsort(-logits, axis=1, kind="stable")
        for off, label in enumerate(labels[lo:hi]):
            pred = int(order[off, 0])
            hits1 += int(pred == label)
            hits5 += int(label in order[off, :5])
            pr, pc = cell_coords(pred, side)
            tr, tc = cell_coords(int(label), side)
            l1 += abs(pr - tr) + abs(pc - tc)
    n = len(episodes)
    return ReadoutReport(hits1 / n, hits5 / n, l1 / n, n)


# -- report assembly ---------------------------------------------------------


@dataclass
class GenerationReport:
    n_context: int
    n_gen: int
    med: np.ndarray
    pixel_mse: np.ndarray
    forced_cumulative: np.ndarray | None = None
    event_totals: np.ndarray | None = None

    def curves(self) -> dict[str, np.ndarray]:
        out = {"med": self.med, "pixel_mse": self.pixel_mse}
        if self.forced_cumulative is not None:
            out["forced_cumulative"] = self.forced_cumulative
        if self.event_totals is not None:
            out["events"] = self.event_totals
        return out


def generation_report(
    model,
    episodes,
    n_context: int,
    n_gen: int,
    seqs=None,
    batch_size: int = 8,
    resolution: int = render.DEFAULT_RESOLUTION,
    forced: bool = False,
) -> GenerationReport:
    seqs = _sequences(model, episodes, seqs)
    report = GenerationReport(
        n_context=n_context,
        n_gen=n_gen,
        med=med_curve(model, episodes, n_context, n_gen, seqs, batch_size),
        pixel_mse=pixel_mse_curve(
            model, episodes, n_context, n_gen, seqs, batch_size, resolution
        ),
    )
    if forced:
        cum, totals = forced_generation_accuracy(
            model, episodes, n_context, n_gen, seqs, batch_size, resolution
        )
        report.forced_cumulative = cum
        report.event_totals = totals
    return report


def write_curves(path, curves: dict[str, np.ndarray]) -> None:
    """CSV with a horizon column (1-based) and one column per named curve."""
    names = list(curves)
    length = len(next(iter(curves.values()))) if curves else 0
    for name in names:
        if len(curves[name]) != length:
            raise ValueError("all curves must share one horizon axis")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["horizon"] + names)
        for s in range(length):
            row = [s + 1]
            for name in names:
                value = curves[name][s]
                row.append("nan" if np.isnan(value) else f"{value:.6f}")
            writer.writerow(row)
