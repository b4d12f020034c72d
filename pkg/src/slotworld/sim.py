"""Bouncing-balls world with interaction-history color rules.

The arena is the continuous unit square; y grows downward to match image
row order. Time advances in whole frames: every step moves each ball by
its velocity, resolves ball-ball contacts as equal-mass elastic
collisions, then resolves wall contacts by mirror reflection. A wall
contact recolors the ball from its interaction history:

    new_color = (own_color + partner_color_at_kth_recent_contact) mod 5

where k is fixed per variant (Mod1/2/3 -> 1/2/3) or chosen by the wall
that was hit (Mod1234: left 1, top 2, right 3, bottom 4). Only ball-ball
contacts enter the history; a ball with fewer than k of them keeps its
color.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_COLORS = 5
COLOR_NAMES = ("blue", "red", "yellow", "violet", "cyan")

WALL_NAMES = ("left", "top", "right", "bottom")
LEFT, TOP, RIGHT, BOTTOM = range(4)

VARIANTS = ("Mod1", "Mod2", "Mod3", "Mod1234")
VARIANT_IDS = {"Mod1": 1, "Mod2": 2, "Mod3": 3, "Mod1234": 4}
_FIXED_K = {"Mod1": 1, "Mod2": 2, "Mod3": 3}

KIND_BALL, KIND_WALL = 0, 1

# columns of Episode.states
SX, SY, SVX, SVY, SRAD, SCOL = range(6)

DEFAULT_RADIUS = 0.08  # arena units
DEFAULT_SPEED = 0.025  # arena units per frame

_PLACEMENT_TRIES = 1000  # rejection samples per ball before giving up

EPISODE_MAGIC = b"OCVTEP1"


@dataclass
class BallState:
    position: np.ndarray  # (2,) center, arena units
    velocity: np.ndarray  # (2,) arena units per frame
    radius: float
    color: int

    def copy(self) -> "BallState":
        return BallState(self.position.copy(), self.velocity.copy(), self.radius, self.color)


@dataclass(frozen=True)
class InteractionEvent:
    frame: int
    subject: int
    kind: int  # KIND_BALL or KIND_WALL
    partner: int = -1
    wall: int = -1
    partner_color: int = -1


@dataclass(frozen=True)
class EpisodeConfig:
    num_balls: int = 4
    num_frames: int = 20
    variant: str = "Mod1"
    radius: float = DEFAULT_RADIUS
    speed: float = DEFAULT_SPEED
    seed: int = 0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.num_balls < 1:
            raise ValueError("num_balls must be at least 1")
        if self.num_frames < 2:
            raise ValueError("num_frames must be at least 2")
        # crude feasibility bound: total disc area must leave slack to place
        if self.num_balls * (2 * self.radius) ** 2 > 0.7:
            raise ValueError("balls cannot feasibly fit in the arena")


@dataclass
class Episode:
    config: EpisodeConfig
    states: np.ndarray  # (T, O, 6) float64, columns SX..SCOL
    events: list[InteractionEvent] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return self.states.shape[0]

    @property
    def num_balls(self) -> int:
        return self.states.shape[1]

    def ball(self, t: int, o: int) -> BallState:
        row = self.states[t, o]
        return BallState(row[0:2].copy(), row[2:4].copy(), float(row[SRAD]), int(row[SCOL]))

    def positions(self, t: int) -> np.ndarray:
        return self.states[t, :, 0:2]

    def colors(self, t: int) -> np.ndarray:
        return self.states[t, :, SCOL].astype(np.int64)


def variant_k(variant: str, wall: int) -> int:
    """Recency index used by the color rule for a hit on the given wall."""
    if variant == "Mod1234":
        return wall + 1
    return _FIXED_K[variant]


def color_on_wall_hit(
    subject_history: list[InteractionEvent], subject_color: int, variant: str, wall: int
) -> int:
    k = variant_k(variant, wall)
    if len(subject_history) < k:
        return subject_color
    partner_color = subject_history[-k].partner_color
    return (subject_color + partner_color) % N_COLORS


def step(
    balls: list[BallState],
    histories: list[list[InteractionEvent]],
    variant: str,
    frame: int,
) -> tuple[list[BallState], list[InteractionEvent]]:
    """Advance one frame. Mutates histories by appending new ball-ball events.

    Order within the frame: move, then ball-ball contacts in ascending
    (i, j) index order, then wall contacts (x axis before y axis). Wall
    color changes read the history as of after this frame's ball-ball
    contacts; recorded partner colors predate any color change at this
    frame.
    """
    balls = [b.copy() for b in balls]
    events: list[InteractionEvent] = []
    n = len(balls)

    for b in balls:
        b.position += b.velocity

    for i in range(n):
        for j in range(i + 1, n):
            bi, bj = balls[i], balls[j]
            delta = bj.position - bi.position
            dist = float(np.hypot(delta[0], delta[1]))
            touch = bi.radius + bj.radius
            if dist >= touch:
                continue
            normal = delta / dist if dist > 0.0 else np.array([1.0, 0.0])
            # equal masses: exchange the normal velocity components
            vi_n = float(bi.velocity @ normal)
            vj_n = float(bj.velocity @ normal)
            bi.velocity += (vj_n - vi_n) * normal
            bj.velocity += (vi_n - vj_n) * normal
            push = 0.5 * (touch - dist)
            bi.position -= push * normal
            bj.position += push * normal
            ev_i = InteractionEvent(frame, i, KIND_BALL, partner=j, partner_color=bj.color)
            ev_j = InteractionEvent(frame, j, KIND_BALL, partner=i, partner_color=bi.color)
            events.extend((ev_i, ev_j))
            histories[i].append(ev_i)
            histories[j].append(ev_j)

    for i, b in enumerate(balls):
        r = b.radius
        for axis, low_wall, high_wall in ((0, LEFT, RIGHT), (1, TOP, BOTTOM)):
            wall = -1
            if b.position[axis] - r <= 0.0:
                b.position[axis] = 2.0 * r - b.position[axis]
                wall = low_wall
            elif b.position[axis] + r >= 1.0:
                b.position[axis] = 2.0 * (1.0 - r) - b.position[axis]
                wall = high_wall
            if wall < 0:
                continue
            b.velocity[axis] = -b.velocity[axis]
            b.color = color_on_wall_hit(histories[i], b.color, variant, wall)
            events.append(InteractionEvent(frame, i, KIND_WALL, wall=wall))

    return balls, events


def _place_balls(config: EpisodeConfig, rng: np.random.Generator) -> list[BallState]:
    placed: list[BallState] = []
    r = config.radius
    for _ in range(config.num_balls):
        for attempt in range(_PLACEMENT_TRIES):
            pos = rng.uniform(r, 1.0 - r, size=2)
            if all(np.hypot(*(pos - b.position)) >= 2.0 * r for b in placed):
                break
        else:
            raise RuntimeError(
                f"could not place {config.num_balls} non-overlapping balls of radius {r}"
            )
        angle = rng.uniform(0.0, 2.0 * np.pi)
        vel = config.speed * np.array([np.cos(angle), np.sin(angle)])
        color = int(rng.integers(N_COLORS))
        placed.append(BallState(pos, vel, r, color))
    return placed


def generate_episode(config: EpisodeConfig) -> Episode:
    """Roll out a fully seeded episode; identical config gives identical bytes."""
    rng = np.random.default_rng(config.seed)
    balls = _place_balls(config, rng)
    states = np.zeros((config.num_frames, config.num_balls, 6), dtype=np.float64)
    events: list[InteractionEvent] = []
    histories: list[list[InteractionEvent]] = [[] for _ in balls]

    def record(t: int) -> None:
        for o, b in enumerate(balls):
            states[t, o] = (*b.position, *b.velocity, b.radius, b.color)

    record(0)
    for t in range(1, config.num_frames):
        balls, new_events = step(balls, histories, config.variant, t)
        events.extend(new_events)
        record(t)
    return Episode(config, states, events)


def episode_to_bytes(ep: Episode) -> bytes:
    cfg = ep.config
    out = [EPISODE_MAGIC]
    out.append(
        struct.pack(
            "<IIIQ", ep.num_balls, ep.num_frames, VARIANT_IDS[cfg.variant], cfg.seed & (2**64 - 1)
        )
    )
    for t in range(ep.num_frames):
        for o in range(ep.num_balls):
            row = ep.states[t, o]
            out.append(struct.pack("<5dq", *row[:SCOL], int(row[SCOL])))
    out.append(struct.pack("<I", len(ep.events)))
    for ev in ep.events:
        out.append(
            struct.pack("<6i", ev.frame, ev.subject, ev.kind, ev.partner, ev.wall, ev.partner_color)
        )
    return b"".join(out)


def episode_from_bytes(data: bytes, radius_hint: float | None = None) -> Episode:
    if data[: len(EPISODE_MAGIC)] != EPISODE_MAGIC:
        raise ValueError("not an episode file (bad magic)")
    pos = len(EPISODE_MAGIC)
    num_balls, num_frames, variant_id, seed = struct.unpack_from("<IIIQ", data, pos)
    pos += struct.calcsize("<IIIQ")
    variant = next((k for k, v in VARIANT_IDS.items() if v == variant_id), None)
    if variant is None:
        raise ValueError(f"unknown variant id {variant_id}")
    states = np.zeros((num_frames, num_balls, 6), dtype=np.float64)
    rec = struct.Struct("<5dq")
    for t in range(num_frames):
        for o in range(num_balls):
            *reals, color = rec.unpack_from(data, pos)
            pos += rec.size
            states[t, o] = (*reals, color)
    (n_events,) = struct.unpack_from("<I", data, pos)
    pos += 4
    ev_rec = struct.Struct("<6i")
    events = []
    for _ in range(n_events):
        frame, subject, kind, partner, wall, partner_color = ev_rec.unpack_from(data, pos)
        pos += ev_rec.size
        events.append(InteractionEvent(frame, subject, kind, partner, wall, partner_color))
    if pos != len(data):
        raise ValueError(f"episode file has {len(data) - pos} trailing bytes")
    config = EpisodeConfig(
        num_balls=num_balls,
        num_frames=num_frames,
        variant=variant,
        radius=float(states[0, 0, SRAD]),
        speed=float(np.hypot(states[0, 0, SVX], states[0, 0, SVY])),
        seed=seed,
    )
    return Episode(config, states, events)


def write_episode(path, ep: Episode) -> None:
    Path(path).write_bytes(episode_to_bytes(ep))


def read_episode(path) -> Episode:
    return episode_from_bytes(Path(path).read_bytes())


def _generate_and_write(args: tuple[EpisodeConfig, str]) -> None:
    config, path = args
    write_episode(path, generate_episode(config))


def generate_dataset(
    config: EpisodeConfig,
    n_train: int,
    n_val: int,
    n_test: int,
    out_dir,
    master_seed: int = 0,
    jobs: int = 1,
) -> dict:
    """Write train/val/test episode files plus manifest.json; returns the manifest.

    Per-episode seeds are drawn from a seed sequence over master_seed, so
    regeneration with the same arguments reproduces every file byte for
    byte regardless of the jobs count.
    """
    out_dir = Path(out_dir)
    counts = {"train": n_train, "val": n_val, "test": n_test}
    total = sum(counts.values())
    seeds = np.random.SeedSequence(master_seed).generate_state(max(total, 1), dtype=np.uint64)

    manifest: dict = {
        "config": {
            "num_balls": config.num_balls,
            "num_frames": config.num_frames,
            "variant": config.variant,
            "radius": config.radius,
            "speed": config.speed,
        },
        "master_seed": master_seed,
        "splits": {},
    }
    work: list[tuple[EpisodeConfig, str]] = []
    cursor = 0
    for split, count in counts.items():
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(count):
            seed = int(seeds[cursor])
            cursor += 1
            rel = f"{split}/ep{i:05d}.bin"
            ep_config = EpisodeConfig(
                num_balls=config.num_balls,
                num_frames=config.num_frames,
                variant=config.variant,
                radius=config.radius,
                speed=config.speed,
                seed=seed,
            )
            work.append((ep_config, str(out_dir / rel)))
            entries.append({"index": i, "seed": seed, "file": rel})
        manifest["splits"][split] = {"count": count, "episodes": entries}

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_generate_and_write, work, chunksize=16))
    else:
        for item in work:
            _generate_and_write(item)

    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    return json.loads(path.read_text())


def load_split(data_dir, split: str, limit: int | None = None) -> list[Episode]:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    entries = manifest["splits"][split]["episodes"]
    if limit is not None:
        entries = entries[:limit]
    return [read_episode(data_dir / e["file"]) for e in entries]
