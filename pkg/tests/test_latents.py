import numpy as np
import pytest

from slotworld import align, latents, render, sim


def ball(x, y, color, radius=0.08):
    return sim.BallState(np.array([x, y]), np.zeros(2), radius, color)


def random_spread_balls(rng, n=4, radius=0.08):
    """Non-overlapping, non-touching balls for clean roundtrips."""
    placed = []
    while len(placed) < n:
        pos = rng.uniform(radius + 0.02, 1 - radius - 0.02, size=2)
        if all(np.hypot(*(pos - b.position)) > 2.6 * radius for b in placed):
            placed.append(ball(pos[0], pos[1], int(rng.integers(5)), radius))
    return placed


def test_oracle_encode_single_ball_layout():
    frame = latents.oracle_encode([ball(0.25, 0.75, 0)], k=4)
    assert frame.shape == (4, latents.slot_dim(5))
    assert frame[0, latents.PRES] == 1.0
    assert np.allclose(frame[0, latents.WHERE], (0.16, 0.16, 0.25, 0.75))
    assert frame[0, latents.DEPTH] == 0.0
    assert np.array_equal(frame[0, latents.WHAT_START :], [1, 0, 0, 0, 0])
    for i in (1, 2, 3):
        assert frame[i, latents.PRES] == 0.0
        assert np.allclose(frame[i, latents.WHERE], latents.EMPTY_WHERE)
        assert not frame[i, latents.WHAT_START :].any()


def test_oracle_encode_empty_and_overflow():
    frame = latents.oracle_encode([], k=3)
    assert not frame[:, latents.PRES].any()
    with pytest.raises(ValueError):
        latents.oracle_encode([ball(0.5, 0.5, 0)] * 5, k=4)


def test_oracle_encode_shuffle_preserves_multiset():
    balls = [ball(0.2, 0.2, 1), ball(0.8, 0.3, 2), ball(0.5, 0.7, 4)]
    plain = latents.oracle_encode(balls, k=8)
    shuffled = latents.oracle_encode(balls, k=8, shuffle_rng=np.random.default_rng(3))
    assert not np.array_equal(plain, shuffled)
    a = sorted(map(tuple, plain))
    b = sorted(map(tuple, shuffled))
    assert a == b


def test_encode_episode_shape():
    ep = sim.generate_episode(sim.EpisodeConfig(num_balls=3, num_frames=7, seed=1))
    seq = latents.encode_episode(ep, k=8)
    assert seq.shape == (7, 8, latents.slot_dim(5))
    assert np.all(seq[:, :3, latents.PRES] == 1.0)
    assert np.all(seq[:, 3:, latents.PRES] == 0.0)


def test_decode_matches_rasterize_for_ground_truth():
    rng = np.random.default_rng(0)
    for _ in range(25):
        balls = random_spread_balls(rng)
        frame = latents.analytic_decode(latents.oracle_encode(balls, k=16))
        direct = render.rasterize(balls)
        assert np.array_equal(frame.pixels, direct.pixels)


def test_decode_respects_pres_threshold():
    frame = latents.empty_frame(2)
    frame[0] = latents.ObjectLatent(0.49, np.array([0.16, 0.16, 0.5, 0.5]), 0.0, np.eye(5)[1]).to_vector()
    frame[1] = latents.ObjectLatent(0.51, np.array([0.16, 0.16, 0.3, 0.3]), 0.0, np.eye(5)[2]).to_vector()
    img = latents.analytic_decode(frame)
    assert render.classify_patch(img, (0.5, 0.5), 0.08) is None
    assert render.classify_patch(img, (0.3, 0.3), 0.08) == 2


def test_decode_depth_ordering_lower_occludes():
    near = latents.ObjectLatent(1.0, np.array([0.2, 0.2, 0.5, 0.5]), 0.1, np.eye(5)[1])
    far = latents.ObjectLatent(1.0, np.array([0.2, 0.2, 0.52, 0.5]), 0.9, np.eye(5)[2])
    frame = np.stack([far.to_vector(), near.to_vector()])
    img = latents.analytic_decode(frame)
    # the deep yellow ball paints first, the shallow red one covers it
    assert render.classify_patch(img, (0.5, 0.5), 0.05) == 1


def test_encode_decode_classify_closure():
    rng = np.random.default_rng(7)
    for _ in range(100):
        balls = random_spread_balls(rng)
        img = latents.analytic_decode(latents.oracle_encode(balls, k=16))
        for b in balls:
            assert render.classify_patch(img, b.position, b.radius) == b.color


def test_blob_encode_matches_oracle_on_separated_balls():
    rng = np.random.default_rng(11)
    for _ in range(50):
        balls = random_spread_balls(rng)
        truth = latents.oracle_encode(balls, k=8)
        blobs = latents.blob_encode(render.rasterize(balls), k=8)
        aligned, _ = align.align_frame(truth, blobs)
        assert np.array_equal(
            aligned[:, latents.PRES].astype(bool), truth[:, latents.PRES].astype(bool)
        )
        present = truth[:, latents.PRES] == 1.0
        centroid_err = np.abs(
            aligned[present, latents.WHERE][:, 2:4] - truth[present, latents.WHERE][:, 2:4]
        )
        assert centroid_err.max() < 1.0 / 64.0
        assert np.array_equal(
            aligned[present, latents.WHAT_START :], truth[present, latents.WHAT_START :]
        )


def test_blob_encode_black_frame_all_empty():
    frame = latents.blob_encode(render.blank_frame(), k=6)
    assert not frame[:, latents.PRES].any()


def test_blob_encode_merges_overlapping_balls():
    balls = [ball(0.5, 0.5, 1), ball(0.56, 0.5, 1)]
    frame = latents.blob_encode(render.rasterize(balls), k=8)
    assert frame[:, latents.PRES].sum() == 1.0


def test_blob_encode_keeps_largest_when_overflowing():
    balls = [
        ball(0.2, 0.2, 0, radius=0.04),
        ball(0.8, 0.2, 1, radius=0.10),
        ball(0.2, 0.8, 2, radius=0.09),
        ball(0.8, 0.8, 3, radius=0.03),
    ]
    frame = latents.blob_encode(render.rasterize(balls), k=2)
    present = frame[frame[:, latents.PRES] == 1.0]
    colors = {int(np.argmax(row[latents.WHAT_START :])) for row in present}
    assert colors == {1, 2}


def test_latents_file_roundtrip(tmp_path):
    ep = sim.generate_episode(sim.EpisodeConfig(num_balls=4, num_frames=6, seed=3))
    seq = latents.encode_episode(ep, k=8).astype(np.float32)
    path = tmp_path / "ep.lz"
    latents.write_latents(path, seq)
    assert path.read_bytes()[:7] == b"OCVTLZ1"
    back = latents.read_latents(path)
    assert back.shape == seq.shape
    assert np.array_equal(back, seq)


def test_latents_file_rejects_truncation(tmp_path):
    path = tmp_path / "bad.lz"
    ep = sim.generate_episode(sim.EpisodeConfig(num_balls=2, num_frames=4, seed=9))
    latents.write_latents(path, latents.encode_episode(ep, k=4))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        latents.read_latents(path)


def test_object_latent_vector_roundtrip():
    obj = latents.ObjectLatent(1.0, np.array([0.1, 0.1, 0.4, 0.6]), 0.0, np.eye(5)[3])
    back = latents.ObjectLatent.from_vector(obj.to_vector())
    assert back.pres == obj.pres
    assert np.array_equal(back.where, obj.where)
    assert np.array_equal(back.what, obj.what)
