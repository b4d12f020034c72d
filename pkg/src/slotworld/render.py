"""Rasterization of ball states to RGB frames, and pixel-level color readback.

Discs are hard-edged: a pixel belongs to a ball when its center lies
within the scaled radius of the scaled ball center. Colors come from a
fixed five-entry palette indexed by the color ordinals. The patch
classifier inverts rendering analytically, so no learned component sits
inside the metrics.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

# ordinals: blue, red, yellow, violet, cyan
PALETTE = np.array(
    [
        (0, 0, 255),
        (255, 0, 0),
        (255, 255, 0),
        (238, 130, 238),
        (0, 255, 255),
    ],
    dtype=np.uint8,
)

DEFAULT_RESOLUTION = 64


@dataclass
class Frame:
    pixels: np.ndarray  # (height, width, 3) uint8

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def blank_frame(resolution: int = DEFAULT_RESOLUTION) -> Frame:
    return Frame(np.zeros((resolution, resolution, 3), dtype=np.uint8))


def _disc_mask(resolution: int, center: np.ndarray, radius: float) -> tuple:
    """Rows, cols and boolean mask of pixels whose centers fall in the disc."""
    cx = float(center[0]) * resolution
    cy = float(center[1]) * resolution
    r = float(radius) * resolution
    row_lo = max(0, int(np.floor(cy - r - 1)))
    row_hi = min(resolution, int(np.ceil(cy + r + 1)))
    col_lo = max(0, int(np.floor(cx - r - 1)))
    col_hi = min(resolution, int(np.ceil(cx + r + 1)))
    if row_lo >= row_hi or col_lo >= col_hi:
        return slice(0, 0), slice(0, 0), np.zeros((0, 0), dtype=bool)
    rows = np.arange(row_lo, row_hi)[:, None] + 0.5
    cols = np.arange(col_lo, col_hi)[None, :] + 0.5
    mask = (cols - cx) ** 2 + (rows - cy) ** 2 <= r * r
    return slice(row_lo, row_hi), slice(col_lo, col_hi), mask


def rasterize(balls, resolution: int = DEFAULT_RESOLUTION) -> Frame:
    """Paint filled discs; later items in `balls` overwrite earlier ones.

    Each item needs position (2,), radius and color attributes (sim
    BallStates and decoded objects both qualify).
    """
    pixels = np.zeros((resolution, resolution, 3), dtype=np.uint8)
    for b in balls:
        rows, cols, mask = _disc_mask(resolution, b.position, b.radius)
        # rows/cols are slices, so this indexes a view of the canvas
        pixels[rows, cols][mask] = PALETTE[int(b.color)]
    return Frame(pixels)


def classify_patch(frame: Frame, center, radius: float) -> int | None:
    """Dominant palette ordinal inside the disc at `center`, or None if blank.

    Averages the non-black pixels in the patch and snaps to the nearest
    palette color; equidistant palette entries resolve to the lowest
    ordinal.
    """
    resolution = frame.width
    rows, cols, mask = _disc_mask(resolution, np.asarray(center, dtype=float), radius)
    patch = frame.pixels[rows, cols][mask]
    if patch.size == 0:
        return None
    lit = patch[patch.any(axis=1)]
    if lit.size == 0:
        return None
    mean_rgb = lit.astype(np.float64).mean(axis=0)
    dist = ((PALETTE.astype(np.float64) - mean_rgb) ** 2).sum(axis=1)
    return int(np.argmin(dist))


def frame_mse(a: Frame, b: Frame) -> float:
    """Mean squared error over channel values normalized to [0, 1]."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"frame shapes differ: {a.pixels.shape} vs {b.pixels.shape}")
    da = a.pixels.astype(np.float64) / 255.0
    db = b.pixels.astype(np.float64) / 255.0
    return float(((da - db) ** 2).mean())


def write_image(path, frame: Frame) -> None:
    """Binary PPM (P6), 8-bit channels."""
    header = f"P6\n{frame.width} {frame.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + frame.pixels.tobytes())


def read_image(path) -> Frame:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":  # comment line
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported max channel value {maxval}")
    payload = data[pos:]
    expected = width * height * 3
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Frame(pixels.copy())


def write_frame_sequence(directory, frames: list[Frame]) -> list[Path]:
    """Write frame<t>.ppm files under `directory`; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(frames):
        p = directory / f"frame{t:03d}.ppm"
        write_image(p, frame)
        paths.append(p)
    return paths
