"""Slot-token transformer over latent frames.

Frames of K slot vectors are projected by one shared affine map, tagged
with a sinusoidal code for their timestep (slots of a frame share the
code; there is no per-slot positional signal), and run through pre-norm
residual attention blocks under a block-causal mask: token (t, i) sees
every token of timesteps t' <= t, including all slots of its own frame.
Heads on the outputs predict the next frame per slot. The where head is
residual and bounded: predicted where = clip(input where + c*tanh(raw)),
so one step can move a box by at most c on any axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from slotworld import align, latents
from slotworld import tensor as T

PRES_EPS = 1e-6  # predicted presence stays inside the open interval


@dataclass(frozen=True)
class DynamicsConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 3
    d_ff: int = 128
    slots: int = latents.DEFAULT_K
    d_what: int = latents.DEFAULT_D_WHAT
    max_shift: float = 0.2  # the clamp constant c
    dropout: float = 0.0
    readout_cells: int = 0  # 0 = no CLS readout head

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 < self.max_shift < 1.0:
            raise ValueError("max_shift must lie strictly between 0 and 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def slot_dim(self) -> int:
        return latents.slot_dim(self.d_what)

    @property
    def head_width(self) -> int:
        # delta-where(4) + what + depth(1) + pres logit(1)
        return 4 + self.d_what + 2

    def to_meta(self) -> dict:
        return {
            "kind": "dynamics",
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "d_ff": self.d_ff,
            "slots": self.slots,
            "d_what": self.d_what,
            "max_shift": self.max_shift,
            "dropout": self.dropout,
            "readout_cells": self.readout_cells,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "DynamicsConfig":
        return cls(
            d_model=int(meta["d_model"]),
            n_heads=int(meta["n_heads"]),
            n_layers=int(meta["n_layers"]),
            d_ff=int(meta["d_ff"]),
            slots=int(meta["slots"]),
            d_what=int(meta["d_what"]),
            max_shift=float(meta["max_shift"]),
            dropout=float(meta["dropout"]),
            readout_cells=int(meta["readout_cells"]),
        )


def time_encoding(t: int, d_model: int) -> np.ndarray:
    """Sinusoidal code for one timestep; geometric frequency ladder."""
    if t < 0:
        raise ValueError("timestep must be nonnegative")
    half = d_model // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    enc = np.zeros(d_model, dtype=np.float64)
    enc[0 : 2 * half : 2] = np.sin(t * freqs)
    enc[1 : 2 * half : 2] = np.cos(t * freqs)
    return enc


def build_block_causal_mask(n_frames: int, k: int) -> np.ndarray:
    """(T*K, T*K) boolean mask: token (t, i) may attend to (t', j) iff t' <= t."""
    if n_frames < 1 or k < 1:
        raise ValueError("mask needs at least one frame and one slot")
    frame_of = np.repeat(np.arange(n_frames), k)
    return frame_of[None, :] <= frame_of[:, None]


def build_cls_mask(n_frames: int, k: int) -> np.ndarray:
    """Block-causal mask plus a CLS token at the final index.

    The CLS row is all-true (it reads everything); no slot token can see
    the CLS column.
    """
    n = n_frames * k
    mask = np.zeros((n + 1, n + 1), dtype=bool)
    mask[:n, :n] = build_block_causal_mask(n_frames, k)
    mask[n, :] = True
    return mask


def heads_to_frame(heads: dict[str, T.Tensor], t: int) -> np.ndarray:
    """Assemble head values at input position t into (B, K, slot_dim) latents."""
    pres = heads["pres"].values[:, t]
    b, k = pres.shape
    d_what = heads["what"].values.shape[-1]
    frame = np.zeros((b, k, latents.WHAT_START + d_what), dtype=np.float64)
    frame[..., latents.PRES] = pres
    frame[..., latents.WHERE] = heads["where"].values[:, t]
    frame[..., latents.DEPTH] = heads["depth"].values[:, t]
    frame[..., latents.WHAT_START :] = heads["what"].values[:, t]
    return frame


def _init_store(config: DynamicsConfig, seed: int, dtype) -> T.ParameterStore:
    rng = np.random.default_rng(seed)
    store = T.ParameterStore()

    # fan-in scaling keeps the content embedding comparable to the unit
    # amplitude time code; a flat small init buries it behind the code
    def weight(name: str, shape: tuple[int, ...], scale: float | None = None) -> None:
        std = scale if scale is not None else 1.0 / math.sqrt(shape[0])
        store.add(name, rng.normal(0.0, std, size=shape).astype(dtype))

    def zeros(name: str, shape: tuple[int, ...]) -> None:
        store.add(name, np.zeros(shape, dtype=dtype))

    def ones(name: str, shape: tuple[int, ...]) -> None:
        store.add(name, np.ones(shape, dtype=dtype))

    d = config.d_model
    weight("embed.w", (config.slot_dim, d))
    zeros("embed.b", (d,))
    for i in range(config.n_layers):
        p = f"block{i}"
        ones(f"{p}.ln1.gain", (d,))
        zeros(f"{p}.ln1.bias", (d,))
        for part in ("q", "k", "o"):
            weight(f"{p}.attn.w{part}", (d, d))
            zeros(f"{p}.attn.b{part}", (d,))
        # values start as near-copies of the attended token, so content a
        # head retrieves is readable downstream from the first step; with a
        # random projection here, rare-event signals (recolors) have to
        # relearn the value path before they earn any loss reduction
        store.add(
            f"{p}.attn.wv",
            (np.eye(d) + rng.normal(0.0, 0.02, size=(d, d))).astype(dtype),
        )
        zeros(f"{p}.attn.bv", (d,))
        ones(f"{p}.ln2.gain", (d,))
        zeros(f"{p}.ln2.bias", (d,))
        weight(f"{p}.ff.w1", (d, config.d_ff))
        zeros(f"{p}.ff.b1", (config.d_ff,))
        weight(f"{p}.ff.w2", (config.d_ff, d))
        zeros(f"{p}.ff.b2", (d,))
    ones("final.gain", (d,))
    zeros("final.bias", (d,))
    weight("head.w1", (d, d))
    zeros("head.b1", (d,))
    # near-zero head output: the box update starts as the identity
    weight("head.w2", (d, config.head_width), scale=0.02)
    zeros("head.b2", (config.head_width,))
    if config.readout_cells > 0:
        weight("cls.embed", (1, d), scale=1.0)
        weight("readout.w1", (d, d))
        zeros("readout.b1", (d,))
        weight("readout.w2", (d, config.readout_cells + 2), scale=0.02)
        zeros("readout.b2", (config.readout_cells + 2,))
    return store


class DynamicsModel:
    """Parameters plus the forward, prediction and rollout procedures."""

    def __init__(
        self,
        config: DynamicsConfig,
        store: T.ParameterStore | None = None,
        seed: int = 0,
        dtype=np.float32,
    ) -> None:
        self.config = config
        self.store = store if store is not None else _init_store(config, seed, dtype)
        self.dtype = self.store["embed.w"].values.dtype

    # -- persistence ---------------------------------------------------
    def save(self, path, include_optimizer: bool = False) -> None:
        T.save_checkpoint(path, self.store, meta=self.config.to_meta(), include_optimizer=include_optimizer)

    @classmethod
    def load(cls, path) -> "DynamicsModel":
        store, meta = T.load_checkpoint(path)
        if meta.get("kind") != "dynamics":
            raise ValueError(f"{path}: checkpoint does not hold a dynamics model")
        return cls(DynamicsConfig.from_meta(meta), store=store)

    def with_readout(self, cells: int = 16, seed: int = 0) -> "DynamicsModel":
        """Copy of this model extended with CLS and readout parameters."""
        config = replace(self.config, readout_cells=cells)
        fresh = DynamicsModel(config, seed=seed, dtype=self.dtype)
        for name, p in self.store.items():
            fresh.store[name].values = p.values.copy()
        return fresh

    # -- forward pieces --------------------------------------------------
    def _time_codes(self, n_frames: int) -> np.ndarray:
        codes = np.stack([time_encoding(t, self.config.d_model) for t in range(n_frames)])
        return np.repeat(codes, self.config.slots, axis=0).astype(self.dtype)

    def embed(self, latent_seq: np.ndarray) -> T.Tensor:
        """(B, T, K, slot_dim) latents -> (B, T*K, d_model) tokens."""
        cfg = self.config
        b, n_frames, k, dim = latent_seq.shape
        if k != cfg.slots or dim != cfg.slot_dim:
            raise ValueError(
                f"latents have shape {latent_seq.shape[1:]}, model expects "
                f"(*, {cfg.slots}, {cfg.slot_dim})"
            )
        flat = T.Tensor(latent_seq.reshape(b * n_frames * k, dim).astype(self.dtype))
        tokens = T.matmul(flat, self.store["embed.w"]) + self.store["embed.b"]
        tokens = T.reshape(tokens, (b, n_frames * k, cfg.d_model))
        return tokens + T.Tensor(self._time_codes(n_frames))

    def _project(self, x: T.Tensor, w: T.Tensor, bias: T.Tensor) -> T.Tensor:
        b, n, _ = x.shape
        flat = T.reshape(x, (b * n, x.shape[-1]))
        out = T.matmul(flat, w) + bias
        return T.reshape(out, (b, n, w.shape[-1]))

    def _attention(self, x: T.Tensor, mask: np.ndarray, prefix: str, sink: list | None) -> T.Tensor:
        cfg = self.config
        b, n, d = x.shape
        heads, dh = cfg.n_heads, d // cfg.n_heads

        def split(t: T.Tensor) -> T.Tensor:  # (B,N,d) -> (B,H,N,dh)
            return T.transpose(T.reshape(t, (b, n, heads, dh)), 1, 2)

        q = split(self._project(x, self.store[f"{prefix}.wq"], self.store[f"{prefix}.bq"]))
        k = split(self._project(x, self.store[f"{prefix}.wk"], self.store[f"{prefix}.bk"]))
        v = split(self._project(x, self.store[f"{prefix}.wv"], self.store[f"{prefix}.bv"]))
        scores = T.matmul(q, T.transpose(k, 2, 3)) * (1.0 / np.sqrt(dh))
        probs = T.masked_softmax(scores, mask)
        if sink is not None:
            sink.append(probs.values)
        mixed = T.transpose(T.matmul(probs, v), 1, 2)  # (B,N,H,dh)
        mixed = T.reshape(mixed, (b, n, d))
        return self._project(mixed, self.store[f"{prefix}.wo"], self.store[f"{prefix}.bo"])

    def transform(
        self,
        latent_seq: np.ndarray,
        mask: np.ndarray | None = None,
        extra_tokens: T.Tensor | None = None,
        attention_sink: list | None = None,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
    ) -> T.Tensor:
        """Embed, optionally append extra tokens, and run the block stack."""
        cfg = self.config
        x = self.embed(latent_seq)
        if extra_tokens is not None:
            x = T.concat([x, extra_tokens], axis=1)
        if mask is None:
            mask = build_block_causal_mask(latent_seq.shape[1], cfg.slots)
        if mask.shape[0] != x.shape[1]:
            raise ValueError(f"mask spans {mask.shape[0]} tokens, input has {x.shape[1]}")
        drop = cfg.dropout if train_mode else 0.0
        if drop > 0.0 and rng is None:
            raise ValueError("dropout needs a generator in train mode")
        for i in range(cfg.n_layers):
            p = f"block{i}"
            normed = T.layer_norm(x, self.store[f"{p}.ln1.gain"], self.store[f"{p}.ln1.bias"])
            attended = self._attention(normed, mask, f"{p}.attn", attention_sink)
            if drop > 0.0:
                attended = T.dropout(attended, drop, rng)
            x = x + attended
            normed = T.layer_norm(x, self.store[f"{p}.ln2.gain"], self.store[f"{p}.ln2.bias"])
            hidden = T.relu(self._project(normed, self.store[f"{p}.ff.w1"], self.store[f"{p}.ff.b1"]))
            ff = self._project(hidden, self.store[f"{p}.ff.w2"], self.store[f"{p}.ff.b2"])
            if drop > 0.0:
                ff = T.dropout(ff, drop, rng)
            x = x + ff
        return T.layer_norm(x, self.store["final.gain"], self.store["final.bias"])

    def forward_predict(
        self,
        latent_seq: np.ndarray,
        attention_sink: list | None = None,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
    ) -> dict[str, T.Tensor]:
        """Per-slot next-frame heads for every input position.

        Entry [b, t] predicts frame t+1 of sequence b. Keys: pres
        (B,T,K) in the open interval, where (B,T,K,4) in [0,1], depth
        (B,T,K), what (B,T,K,d_what).
        """
        cfg = self.config
        b, n_frames, k, _ = latent_seq.shape
        out = self.transform(
            latent_seq, attention_sink=attention_sink, train_mode=train_mode, rng=rng
        )
        hidden = T.relu(self._project(out, self.store["head.w1"], self.store["head.b1"]))
        raw = self._project(hidden, self.store["head.w2"], self.store["head.b2"])
        raw = T.reshape(raw, (b, n_frames, k, cfg.head_width))
        d_what = cfg.d_what
        delta = T.slice_axis(raw, 3, 0, 4)
        what = T.slice_axis(raw, 3, 4, 4 + d_what)
        depth = T.reshape(T.slice_axis(raw, 3, 4 + d_what, 5 + d_what), (b, n_frames, k))
        logit = T.reshape(T.slice_axis(raw, 3, 5 + d_what, 6 + d_what), (b, n_frames, k))
        base_where = T.Tensor(latent_seq[..., latents.WHERE].astype(self.dtype))
        where = T.clip(base_where + cfg.max_shift * T.tanh(delta), 0.0, 1.0)
        pres = T.clip(T.sigmoid(logit), PRES_EPS, 1.0 - PRES_EPS)
        return {"pres": pres, "where": where, "depth": depth, "what": what}

    def predicted_frame(self, heads: dict[str, T.Tensor], t: int) -> np.ndarray:
        return heads_to_frame(heads, t)

    # -- rollout -----------------------------------------------------------
    def rollout_batch(
        self,
        contexts: np.ndarray,
        n_steps: int,
        forced_latents: np.ndarray | None = None,
    ) -> np.ndarray:
        """Autoregressive continuation of (B, T0, K, slot_dim) contexts.

        Predicted pres feeds back as its continuous value. In forced mode
        every predicted slot with pres > 0.5 has its where replaced by the
        where of the ground-truth slot it aligns to, taken from
        forced_latents (B, n_steps, K, slot_dim).
        """
        if n_steps == 0:
            return contexts.copy()
        if forced_latents is not None and forced_latents.shape[1] < n_steps:
            raise ValueError(
                f"forced rollout of {n_steps} steps needs {n_steps} ground-truth "
                f"frames, got {forced_latents.shape[1]}"
            )
        current = contexts.astype(np.float64).copy()
        for s in range(n_steps):
            heads = self.forward_predict(current)
            frame = self.predicted_frame(heads, current.shape[1] - 1)
            if forced_latents is not None:
                for b in range(frame.shape[0]):
                    truth = forced_latents[b, s]
                    aligned, _ = align.align_frame(frame[b], truth)
                    present = frame[b, :, latents.PRES] > 0.5
                    frame[b][present, latents.WHERE] = aligned[present][:, latents.WHERE]
            current = np.concatenate([current, frame[:, None]], axis=1)
        return current

    def rollout(
        self, context: np.ndarray, n_steps: int, forced_latents: np.ndarray | None = None
    ) -> np.ndarray:
        forced = forced_latents[None] if forced_latents is not None else None
        return self.rollout_batch(context[None], n_steps, forced)[0]

    # -- readout -----------------------------------------------------------
    def readout(
        self,
        latent_seq: np.ndarray,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[T.Tensor, T.Tensor]:
        """CLS-token readout: (B, cells) logits and (B, 2) center estimate."""
        cfg = self.config
        if cfg.readout_cells <= 0:
            raise ValueError("model has no readout head; use with_readout first")
        b, n_frames, _, _ = latent_seq.shape
        cls_tok = T.embedding_lookup(self.store["cls.embed"], np.zeros((b, 1), dtype=np.int64))
        mask = build_cls_mask(n_frames, cfg.slots)
        out = self.transform(
            latent_seq, mask=mask, extra_tokens=cls_tok, train_mode=train_mode, rng=rng
        )
        last = T.slice_axis(out, 1, n_frames * cfg.slots, n_frames * cfg.slots + 1)
        last = T.reshape(last, (b, cfg.d_model))
        hidden = T.relu(T.matmul(last, self.store["readout.w1"]) + self.store["readout.b1"])
        raw = T.matmul(hidden, self.store["readout.w2"]) + self.store["readout.b2"]
        logits = T.slice_axis(raw, 1, 0, cfg.readout_cells)
        center = T.slice_axis(raw, 1, cfg.readout_cells, cfg.readout_cells + 2)
        return logits, center
