"""Object latent frames: slot layout, encoders, decoder, file format.

A latent frame is a (K, slot_dim) float array whose rows are slot
vectors laid out as [pres, h, w, x, y, depth, what...]: presence in
{0,1} (or (0,1) for model output), a where block of box extents and
center scaled to [0,1], a depth scalar (fixed 0 in this 2D world), and a
what block holding a color one-hot in its first five entries. Slot order
carries no meaning; consumers align by matching, never by index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from slotworld import render

# slot vector layout: [pres, h, w, x, y, depth, what...]
PRES = 0
WHERE = slice(1, 5)
DEPTH = 5
WHAT_START = 6

DEFAULT_K = 16
DEFAULT_D_WHAT = 5

EMPTY_WHERE = (0.0, 0.0, 0.5, 0.5)  # zero-size box parked at the center

LATENTS_MAGIC = b"OCVTLZ1"


def slot_dim(d_what: int = DEFAULT_D_WHAT) -> int:
    return WHAT_START + d_what


@dataclass
class ObjectLatent:
    pres: float
    where: np.ndarray  # (h, w, x, y)
    depth: float = 0.0
    what: np.ndarray = field(default_factory=lambda: np.zeros(DEFAULT_D_WHAT))

    def to_vector(self) -> np.ndarray:
        return np.concatenate(([self.pres], self.where, [self.depth], self.what))

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "ObjectLatent":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(float(vec[PRES]), vec[WHERE].copy(), float(vec[DEPTH]), vec[WHAT_START:].copy())


def empty_frame(k: int, d_what: int = DEFAULT_D_WHAT) -> np.ndarray:
    frame = np.zeros((k, slot_dim(d_what)), dtype=np.float64)
    frame[:, WHERE] = EMPTY_WHERE
    return frame


def oracle_encode(
    balls, k: int = DEFAULT_K, d_what: int = DEFAULT_D_WHAT, shuffle_rng=None
) -> np.ndarray:
    """Tokenize ground-truth ball states into a (k, slot_dim) latent frame.

    Ball o fills slot o with pres 1, a (2r, 2r) box at its center and a
    one-hot color; remaining slots are empty. A generator passed as
    shuffle_rng permutes the slots, which is harmless to consumers by the
    set semantics and useful for order-invariance checks.
    """
    balls = list(balls)
    if len(balls) > k:
        raise ValueError(f"{len(balls)} objects exceed the {k} available slots")
    frame = empty_frame(k, d_what)
    for i, b in enumerate(balls):
        frame[i, PRES] = 1.0
        frame[i, WHERE] = (2 * b.radius, 2 * b.radius, b.position[0], b.position[1])
        frame[i, WHAT_START + int(b.color)] = 1.0
    if shuffle_rng is not None:
        frame = frame[shuffle_rng.permutation(k)]
    return frame


def encode_episode(
    episode, k: int = DEFAULT_K, d_what: int = DEFAULT_D_WHAT, shuffle_rng=None
) -> np.ndarray:
    """oracle_encode every frame of an episode -> (T, k, slot_dim)."""
    frames = [
        oracle_encode(
            [episode.ball(t, o) for o in range(episode.num_balls)], k, d_what, shuffle_rng
        )
        for t in range(episode.num_frames)
    ]
    return np.stack(frames)


def blob_encode(frame: render.Frame, k: int = DEFAULT_K, d_what: int = DEFAULT_D_WHAT) -> np.ndarray:
    """Tokenize a rendered frame by connected-component analysis.

    Non-black pixels are grouped 4-connected; each blob becomes a present
    slot with its bounding-box extents, centroid and nearest palette
    color. Overlapping balls merge into one blob by construction. With
    more blobs than slots the largest k survive.
    """
    pixels = frame.pixels
    height, width = pixels.shape[:2]
    lit = pixels.any(axis=2)
    labels, count = ndimage.label(lit)
    order = range(1, count + 1)
    if count > k:
        sizes = ndimage.sum_labels(lit, labels, index=list(order))
        keep = set((np.argsort(sizes)[::-1][:k] + 1).tolist())
        order = [i for i in range(1, count + 1) if i in keep]
    out = empty_frame(k, d_what)
    palette = render.PALETTE.astype(np.float64)
    for slot, label in enumerate(order):
        rows, cols = np.nonzero(labels == label)
        h = (rows.max() - rows.min() + 1) / height
        w = (cols.max() - cols.min() + 1) / width
        x = (cols.mean() + 0.5) / width
        y = (rows.mean() + 0.5) / height
        mean_rgb = pixels[rows, cols].astype(np.float64).mean(axis=0)
        color = int(np.argmin(((palette - mean_rgb) ** 2).sum(axis=1)))
        out[slot, PRES] = 1.0
        out[slot, WHERE] = (h, w, x, y)
        out[slot, WHAT_START + color] = 1.0
    return out


@dataclass
class _DecodedBall:
    position: np.ndarray
    radius: float
    color: int


def analytic_decode(latent_frame: np.ndarray, resolution: int = render.DEFAULT_RESOLUTION):
    """Paint slots with pres > 0.5 as discs; deeper slots paint first."""
    latent_frame = np.asarray(latent_frame)
    visible = [i for i in range(latent_frame.shape[0]) if latent_frame[i, PRES] > 0.5]
    # stable sort keeps slot order among equal depths
    visible.sort(key=lambda i: -latent_frame[i, DEPTH])
    balls = []
    for i in visible:
        vec = latent_frame[i]
        balls.append(
            _DecodedBall(
                position=vec[WHERE][2:4],
                radius=float(vec[WHERE][0]) / 2.0,
                color=int(np.argmax(vec[WHAT_START:])),
            )
        )
    return render.rasterize(balls, resolution)


def write_latents(path, sequence: np.ndarray) -> None:
    """Serialize a (T, K, slot_dim) latent sequence in the OCVTLZ1 layout."""
    sequence = np.asarray(sequence)
    if sequence.ndim != 3:
        raise ValueError(f"expected (T, K, slot_dim) array, got shape {sequence.shape}")
    t, k, dim = sequence.shape
    d_what = dim - WHAT_START
    header = LATENTS_MAGIC + struct.pack("<III", t, k, d_what)
    payload = np.ascontiguousarray(sequence, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_latents(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[: len(LATENTS_MAGIC)] != LATENTS_MAGIC:
        raise ValueError(f"{path}: not a latent sequence file (bad magic)")
    t, k, d_what = struct.unpack_from("<III", data, len(LATENTS_MAGIC))
    expected = t * k * slot_dim(d_what)
    payload = np.frombuffer(data, dtype="<f4", offset=len(LATENTS_MAGIC) + 12)
    if payload.size != expected:
        raise ValueError(f"{path}: expected {expected} floats, found {payload.size}")
    return payload.astype(np.float32).reshape(t, k, slot_dim(d_what))
