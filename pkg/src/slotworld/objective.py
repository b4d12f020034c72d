"""Slot reconstruction loss, the optimizer loop, and readout fine-tuning."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from slotworld import align, evaluate, latents
from slotworld import tensor as T


@dataclass(frozen=True)
class LossWeights:
    """Per-term weights of the slot reconstruction loss."""

    where: float = 20.0
    depth: float = 0.0
    pres: float = 1.0
    what: float = 4.0

    def __post_init__(self) -> None:
        for name in ("where", "depth", "pres", "what"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"loss weight {name} must be finite and nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 16
    total_steps: int = 2000
    clip_norm: float = 1.0
    seed: int = 0
    eval_interval: int = 250
    context: int = 19  # window length in frames; inputs are the first context - 1
    stop_accuracy: float | None = None
    val_limit: int | None = None
    deterministic: bool = False

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")
        if self.batch_size < 1 or self.total_steps < 0 or self.context < 2:
            raise ValueError("batch_size >= 1, total_steps >= 0, context >= 2 required")
        if self.eval_interval < 0:
            raise ValueError("eval_interval must be nonnegative")


def object_loss(heads, aligned_target, weights: LossWeights | None = None) -> T.Tensor:
    """Weighted per-slot reconstruction loss, averaged over every slot.

    heads maps pres/where/depth/what to values shaped (..., K), (..., K, 4),
    (..., K) and (..., K, d_what); aligned_target is the matching
    (..., K, slot_dim) array with slots already assigned to predictions.
    The box, what and depth terms are L1 gaps; presence enters a
    cross-entropy against the target bit and must lie strictly inside
    (0, 1). Leading axes (frames, batch) average out with the slots.
    """
    if weights is None:
        weights = LossWeights()
    pres = heads["pres"]
    pres_values = pres.values if isinstance(pres, T.Tensor) else np.asarray(pres)
    if pres_values.min() <= 0.0 or pres_values.max() >= 1.0:
        raise ValueError("predicted presence must lie strictly inside (0, 1)")
    target = np.asarray(aligned_target)
    dt = pres_values.dtype
    t_pres = target[..., latents.PRES].astype(dt)
    t_where = target[..., latents.WHERE].astype(dt)
    t_depth = target[..., latents.DEPTH].astype(dt)
    t_what = target[..., latents.WHAT_START :].astype(dt)

    terms = []
    if weights.where:
        terms.append(T.mul(weights.where, T.tsum(T.absval(T.sub(heads["where"], t_where)), axis=-1)))
    if weights.what:
        terms.append(T.mul(weights.what, T.tsum(T.absval(T.sub(heads["what"], t_what)), axis=-1)))
    if weights.depth:
        terms.append(T.mul(weights.depth, T.absval(T.sub(heads["depth"], t_depth))))
    if weights.pres:
        on = T.mul(t_pres, T.log(pres))
        off = T.mul(1.0 - t_pres, T.log(T.sub(1.0, pres)))
        terms.append(T.mul(-weights.pres, T.add(on, off)))
    if not terms:
        return T.tmean(T.mul(0.0, pres))
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return T.tmean(total)


def batch_heads_loss(model, batch: np.ndarray, weights: LossWeights, train_mode: bool = False, rng=None):
    """Forward a window batch, align targets off the tape, score the loss.

    batch is (B, W, K, slot_dim): frames [:, :-1] feed the model and
    frames [:, 1:] are the targets. Alignment works on plain head values,
    so no gradient ever flows through the assignment. Returns
    (loss tensor, heads, aligned targets).
    """
    inputs = batch[:, :-1]
    targets = batch[:, 1:]
    heads = model.forward_predict(inputs, train_mode=train_mode, rng=rng)
    aligned = align.align_latents(heads["pres"].values, heads["where"].values, targets)
    loss = object_loss(heads, aligned, weights)
    return loss, heads, aligned


def batch_loss(model, batch, weights: LossWeights | None = None) -> float:
    """Aligned loss of one window batch without recording gradients."""
    if weights is None:
        weights = LossWeights()
    loss, _, _ = batch_heads_loss(model, np.asarray(batch), weights)
    return float(loss.values)


def train_step(
    model,
    batch: np.ndarray,
    weights: LossWeights,
    lr: float = 3e-4,
    clip_norm: float = 1.0,
    rng=None,
    train_mode: bool = True,
) -> tuple[float, float]:
    """One optimizer update on a window batch. Returns (loss, grad norm)."""
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1] < 2:
        raise ValueError("train batches need shape (B, W, K, slot_dim) with W >= 2")
    with T.Tape() as tape:
        loss, _, _ = batch_heads_loss(model, batch, weights, train_mode=train_mode, rng=rng)
        T.backward(loss, tape)
    norm = T.adam_step(model.store, lr=lr, clip_norm=clip_norm)
    return float(loss.values), norm


def train(
    model,
    train_episodes,
    val_episodes,
    config: TrainConfig,
    weights: LossWeights | None = None,
    out_dir=".",
) -> dict:
    """Window-sampled training with periodic validation and checkpoints.

    Episodes are latent-encoded once up front. Each step samples episodes
    with replacement and a uniform window start. Validation measures
    next-step change accuracy; the best scoring state goes to best.ckpt
    and the final state (with optimizer moments) to last.ckpt.
    """
    if weights is None:
        weights = LossWeights()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    seqs = np.stack(
        [latents.encode_episode(ep, cfg.slots, cfg.d_what) for ep in train_episodes]
    ).astype(np.float32)
    n_eps, ep_len = seqs.shape[0], seqs.shape[1]
    if config.context > ep_len - 1:
        raise ValueError(f"context {config.context} exceeds episode length {ep_len} minus one")
    val_eps = list(val_episodes)[: config.val_limit]
    val_seqs = [latents.encode_episode(ep, cfg.slots, cfg.d_what) for ep in val_eps]

    rng = np.random.default_rng(config.seed)
    window = np.arange(config.context)
    log_path = out / "train_log.csv"
    best_path = out / "best.ckpt"
    last_path = out / "last.ckpt"
    history: list[dict] = []
    best_acc = -1.0
    running = 0.0
    since = 0
    started = time.monotonic()
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train_loss", "val_change_accuracy", "seconds"])
        for step in range(1, config.total_steps + 1):
            pick = rng.integers(0, n_eps, size=config.batch_size)
            starts = rng.integers(0, ep_len - config.context + 1, size=config.batch_size)
            batch = seqs[pick[:, None], starts[:, None] + window]
            loss, _ = train_step(
                model, batch, weights, lr=config.lr, clip_norm=config.clip_norm, rng=rng
            )
            if not math.isfinite(loss):
                raise RuntimeError(f"training diverged: non-finite loss at step {step}")
            running += loss
            since += 1
            due = config.eval_interval and step % config.eval_interval == 0
            if not (due or step == config.total_steps):
                continue
            acc = (
                evaluate.next_step_accuracy(model, val_eps, val_seqs)
                if val_eps
                else float("nan")
            )
            elapsed = 0.0 if config.deterministic else time.monotonic() - started
            mean_loss = running / since
            writer.writerow([step, f"{mean_loss:.6f}", f"{acc:.6f}", f"{elapsed:.3f}"])
            fh.flush()
            history.append({"step": step, "loss": mean_loss, "accuracy": acc})
            running = 0.0
            since = 0
            if acc > best_acc:
                best_acc = acc
                model.save(best_path)
            if config.stop_accuracy is not None and acc >= config.stop_accuracy:
                break
    model.save(last_path, include_optimizer=True)
    if best_acc < 0:  # never validated: mirror the final state
        model.save(best_path)
    return {
        "best": str(best_path),
        "last": str(last_path),
        "log": str(log_path),
        "history": history,
        "best_accuracy": None if best_acc < 0 else best_acc,
    }


# -- readout fine-tuning -----------------------------------------------------


@dataclass(frozen=True)
class ReadoutConfig:
    lr: float = 3e-4
    batch_size: int = 16
    total_steps: int = 1500
    clip_norm: float = 1.0
    seed: int = 0
    eval_interval: int = 100
    hard: bool = False  # withhold the last 20% of input frames
    cells: int = 16
    center_weight: float = 0.0  # auxiliary L1 on the continuous center estimate
    stop_accuracy: float | None = None
    val_limit: int | None = None
    deterministic: bool = False

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")
        if self.batch_size < 1 or self.total_steps < 0 or self.cells < 2:
            raise ValueError("batch_size >= 1, total_steps >= 0, cells >= 2 required")
        if self.center_weight < 0:
            raise ValueError("center_weight must be nonnegative")


def cross_entropy(logits: T.Tensor, labels) -> T.Tensor:
    """Mean softmax cross-entropy; the stability shift is detached."""
    values = logits.values
    labels = np.asarray(labels, dtype=np.int64)
    shift = values.max(axis=1, keepdims=True)
    z = T.sub(logits, shift)
    lse = T.log(T.tsum(T.exp(z), axis=1))
    onehot = np.zeros(values.shape, dtype=values.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = T.tsum(T.mul(z, onehot), axis=1)
    return T.tmean(T.sub(lse, picked))


def train_readout(
    model,
    train_episodes,
    val_episodes,
    config: ReadoutConfig,
    out_dir=".",
) -> dict:
    """Fine-tune a CLS readout to name ball 0's final grid cell.

    A model without a readout head is extended first; all parameters then
    train jointly. Inputs are whole episodes, or only the first 80% of
    frames in the hard variant; the label is always the final-frame cell.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model.config.readout_cells <= 0:
        model = model.with_readout(cells=config.cells, seed=config.seed)
    elif model.config.readout_cells != config.cells:
        raise ValueError(
            f"checkpoint has {model.config.readout_cells} readout cells, config wants {config.cells}"
        )
    cfg = model.config
    side = int(math.isqrt(config.cells))
    if side * side != config.cells:
        raise ValueError("cells must be a perfect square")

    seqs = [latents.encode_episode(ep, cfg.slots, cfg.d_what) for ep in train_episodes]
    inputs = np.stack(evaluate.readout_inputs(seqs, config.hard)).astype(np.float32)
    labels = evaluate.readout_labels(train_episodes, side)
    centers = np.stack(
        [ep.positions(ep.num_frames - 1)[0] for ep in train_episodes]
    ).astype(np.float32)
    val_eps = list(val_episodes)[: config.val_limit]
    val_seqs = [latents.encode_episode(ep, cfg.slots, cfg.d_what) for ep in val_eps]

    rng = np.random.default_rng(config.seed)
    log_path = out / "readout_log.csv"
    best_path = out / "best_readout.ckpt"
    last_path = out / "last_readout.ckpt"
    history: list[dict] = []
    best_top1 = -1.0
    running = 0.0
    since = 0
    started = time.monotonic()
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train_loss", "val_top1", "seconds"])
        for step in range(1, config.total_steps + 1):
            pick = rng.integers(0, len(inputs), size=config.batch_size)
            with T.Tape() as tape:
                logits, center = model.readout(inputs[pick], train_mode=True, rng=rng)
                loss = cross_entropy(logits, labels[pick])
                if config.center_weight:
                    gap = T.tmean(T.absval(T.sub(center, centers[pick])))
                    loss = T.add(loss, T.mul(config.center_weight, gap))
                T.backward(loss, tape)
            T.adam_step(model.store, lr=config.lr, clip_norm=config.clip_norm)
            value = float(loss.values)
            if not math.isfinite(value):
                raise RuntimeError(f"training diverged: non-finite loss at step {step}")
            running += value
            since += 1
            due = config.eval_interval and step % config.eval_interval == 0
            if not (due or step == config.total_steps):
                continue
            top1 = (
                evaluate.readout_eval(model, val_eps, config.hard, val_seqs, side=side).top1
                if val_eps
                else float("nan")
            )
            elapsed = 0.0 if config.deterministic else time.monotonic() - started
            mean_loss = running / since
            writer.writerow([step, f"{mean_loss:.6f}", f"{top1:.6f}", f"{elapsed:.3f}"])
            fh.flush()
            history.append({"step": step, "loss": mean_loss, "top1": top1})
            running = 0.0
            since = 0
            if top1 > best_top1:
                best_top1 = top1
                model.save(best_path)
            if config.stop_accuracy is not None and top1 >= config.stop_accuracy:
                break
    model.save(last_path, include_optimizer=True)
    if best_top1 < 0:
        model.save(best_path)
    return {
        "model": model,
        "best": str(best_path),
        "last": str(last_path),
        "log": str(log_path),
        "history": history,
        "best_top1": None if best_top1 < 0 else best_top1,
    }
