"""Tests for the reconstruction loss and the training loops."""

import math

import numpy as np
import pytest

from slotworld import align, evaluate, latents, objective, sim
from slotworld import tensor as T
from slotworld.dynamics import DynamicsConfig, DynamicsModel


def tiny_config(**kw):
    base = dict(d_model=16, n_heads=2, n_layers=2, d_ff=32, slots=3, d_what=5)
    base.update(kw)
    return DynamicsConfig(**base)


def single_slot_heads(pres, where, depth, what):
    return {
        "pres": T.Tensor(np.array([pres], dtype=np.float64)),
        "where": T.Tensor(np.array([where], dtype=np.float64)),
        "depth": T.Tensor(np.array([depth], dtype=np.float64)),
        "what": T.Tensor(np.array([what], dtype=np.float64)),
    }


def single_slot_target(pres, where, depth, what):
    return np.concatenate(([pres], where, [depth], what))[None]


def random_windows(rng, b, w, k, d_what=5):
    seq = rng.uniform(0.0, 1.0, size=(b, w, k, 6 + d_what))
    seq[..., 0] = (seq[..., 0] > 0.4).astype(float)
    return seq.astype(np.float32)


def make_episodes(n, num_balls=2, num_frames=8, variant="Mod1", first_seed=0):
    return [
        sim.generate_episode(
            sim.EpisodeConfig(
                num_balls=num_balls, num_frames=num_frames, variant=variant, seed=s
            )
        )
        for s in range(first_seed, first_seed + n)
    ]


def loss_reference(heads, target, w):
    """Straight numpy transcription of the weighted per-slot loss."""
    pres = heads["pres"].values.astype(np.float64)
    target = np.asarray(target, dtype=np.float64)
    where_gap = np.abs(heads["where"].values - target[..., 1:5]).sum(-1)
    what_gap = np.abs(heads["what"].values - target[..., 6:]).sum(-1)
    depth_gap = np.abs(heads["depth"].values - target[..., 5])
    t_pres = target[..., 0]
    ce = -(t_pres * np.log(pres) + (1 - t_pres) * np.log(1 - pres))
    per = w.where * where_gap + w.what * what_gap + w.depth * depth_gap + w.pres * ce
    return float(per.mean())


# -- loss weights -------------------------------------------------------------


def test_weights_reject_negative_and_nonfinite():
    with pytest.raises(ValueError):
        objective.LossWeights(where=-1.0)
    with pytest.raises(ValueError):
        objective.LossWeights(pres=float("nan"))
    with pytest.raises(ValueError):
        objective.LossWeights(what=float("inf"))


def test_default_weights():
    w = objective.LossWeights()
    assert (w.where, w.depth, w.pres, w.what) == (20.0, 0.0, 1.0, 4.0)


# -- object loss ---------------------------------------------------------------


def test_loss_half_presence_is_log_two():
    where = np.array([0.2, 0.2, 0.5, 0.5])
    what = np.zeros(5)
    heads = single_slot_heads(0.5, where, 0.0, what)
    target = single_slot_target(1.0, where, 0.0, what)
    w = objective.LossWeights(where=1.0, depth=1.0, pres=1.0, what=1.0)
    loss = objective.object_loss(heads, target, w)
    assert abs(float(loss.values) - math.log(2.0)) < 1e-12


def test_loss_recomputes_weighted_sum():
    # where L1 0.1, what L1 0.05, pres cross-entropy 0.01 under defaults
    where = np.array([0.2, 0.2, 0.5, 0.5])
    what = np.array([1.0, 0.0, 0.0, 0.0, 0.0])
    heads = single_slot_heads(math.exp(-0.01), where + [0.1, 0, 0, 0], 0.3, what + 0.01)
    target = single_slot_target(1.0, where, 0.7, what)
    loss = objective.object_loss(heads, target)
    assert abs(float(loss.values) - 2.21) < 1e-12


def test_loss_vanishes_in_the_limit():
    where = np.array([0.1, 0.1, 0.4, 0.6])
    what = np.array([0.0, 1.0, 0.0, 0.0, 0.0])
    heads = single_slot_heads(1.0 - 1e-9, where, 0.2, what)
    target = single_slot_target(1.0, where, 0.2, what)
    loss = float(objective.object_loss(heads, target).values)
    assert 0.0 < loss < 1e-6


def test_loss_rejects_saturated_presence():
    where = np.zeros(4)
    what = np.zeros(5)
    target = single_slot_target(1.0, where, 0.0, what)
    for bad in (0.0, 1.0):
        heads = single_slot_heads(bad, where, 0.0, what)
        with pytest.raises(ValueError):
            objective.object_loss(heads, target)


def test_loss_matches_reference_on_random_batches():
    rng = np.random.default_rng(11)
    for _ in range(30):
        b, t, k = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 5)
        heads = {
            "pres": T.Tensor(rng.uniform(0.01, 0.99, size=(b, t, k))),
            "where": T.Tensor(rng.uniform(0, 1, size=(b, t, k, 4))),
            "depth": T.Tensor(rng.normal(size=(b, t, k))),
            "what": T.Tensor(rng.normal(size=(b, t, k, 5))),
        }
        target = rng.uniform(0, 1, size=(b, t, k, 11))
        target[..., 0] = rng.integers(0, 2, size=(b, t, k))
        w = objective.LossWeights(
            where=float(rng.uniform(0, 30)),
            depth=float(rng.uniform(0, 2)),
            pres=float(rng.uniform(0, 2)),
            what=float(rng.uniform(0, 8)),
        )
        got = float(objective.object_loss(heads, target, w).values)
        assert abs(got - loss_reference(heads, target, w)) < 1e-10


def test_loss_gradient_flows_to_heads():
    rng = np.random.default_rng(2)
    pres = T.Tensor(rng.uniform(0.2, 0.8, size=(2, 3)), requires_grad=True)
    where = T.Tensor(rng.uniform(0, 1, size=(2, 3, 4)), requires_grad=True)
    heads = {
        "pres": pres,
        "where": where,
        "depth": T.Tensor(np.zeros((2, 3))),
        "what": T.Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True),
    }
    target = rng.uniform(0.1, 0.9, size=(2, 3, 11))
    target[..., 0] = 1.0
    with T.Tape() as tape:
        loss = objective.object_loss(heads, target)
        T.backward(loss, tape)
    assert pres.grad is not None and np.all(np.isfinite(pres.grad))
    assert where.grad is not None and np.any(where.grad != 0)


# -- train step ----------------------------------------------------------------


def test_alignment_adds_no_tape_nodes():
    model = DynamicsModel(tiny_config(), seed=0)
    batch = random_windows(np.random.default_rng(0), 2, 4, 3)
    with T.Tape() as tape:
        heads = model.forward_predict(batch[:, :-1])
        before = len(tape)
        aligned = align.align_latents(
            heads["pres"].values, heads["where"].values, batch[:, 1:]
        )
        assert len(tape) == before
        loss = objective.object_loss(heads, aligned)
        T.backward(loss, tape)
    assert model.store["block0.attn.wq"].grad is not None


def test_batch_loss_invariant_to_slot_shuffles():
    model = DynamicsModel(tiny_config(), seed=1)
    rng = np.random.default_rng(5)
    batch = random_windows(rng, 2, 5, 3)
    base = objective.batch_loss(model, batch)
    for _ in range(5):
        shuffled = batch.copy()
        for b in range(shuffled.shape[0]):
            for t in range(shuffled.shape[1]):
                shuffled[b, t] = shuffled[b, t][rng.permutation(3)]
        other = objective.batch_loss(model, shuffled)
        assert abs(other - base) / max(abs(base), 1e-12) < 1e-4


def test_train_step_rejects_flat_batches():
    model = DynamicsModel(tiny_config(), seed=0)
    with pytest.raises(ValueError):
        objective.train_step(model, np.zeros((2, 1, 3, 11)), objective.LossWeights())


def test_train_step_reduces_loss():
    episodes = make_episodes(6)
    cfg = tiny_config(slots=4)
    model = DynamicsModel(cfg, seed=0)
    seqs = np.stack([latents.encode_episode(ep, 4, 5) for ep in episodes]).astype(np.float32)
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(300):
        pick = rng.integers(0, len(seqs), size=4)
        losses.append(objective.train_step(model, seqs[pick], objective.LossWeights(), lr=3e-3)[0])
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


def test_train_step_is_deterministic():
    episodes = make_episodes(3)
    seqs = np.stack([latents.encode_episode(ep, 3, 5) for ep in episodes]).astype(np.float32)

    def run():
        model = DynamicsModel(tiny_config(), seed=7)
        out = []
        rng = np.random.default_rng(1)
        for _ in range(8):
            pick = rng.integers(0, len(seqs), size=2)
            out.append(objective.train_step(model, seqs[pick], objective.LossWeights())[0])
        return out

    assert run() == run()


# -- train loop ------------------------------------------------------------


def test_train_writes_log_and_checkpoints(tmp_path):
    episodes = make_episodes(5)
    model = DynamicsModel(tiny_config(), seed=0)
    config = objective.TrainConfig(
        total_steps=6, batch_size=2, eval_interval=3, context=7, val_limit=2, seed=0
    )
    summary = objective.train(model, episodes, episodes[:2], config, out_dir=tmp_path)
    assert (tmp_path / "best.ckpt").exists()
    assert (tmp_path / "last.ckpt").exists()
    lines = (tmp_path / "train_log.csv").read_text().strip().splitlines()
    assert lines[0] == "step,train_loss,val_change_accuracy,seconds"
    assert len(lines) == 3  # evaluations at steps 3 and 6
    assert [row["step"] for row in summary["history"]] == [3, 6]


def test_train_zero_steps_emits_initial_checkpoint(tmp_path):
    episodes = make_episodes(2)
    model = DynamicsModel(tiny_config(), seed=3)
    before = {name: p.values.copy() for name, p in model.store.items()}
    config = objective.TrainConfig(total_steps=0, context=7, seed=0)
    objective.train(model, episodes, [], config, out_dir=tmp_path)
    reloaded = DynamicsModel.load(tmp_path / "best.ckpt")
    for name, values in before.items():
        assert np.array_equal(reloaded.store[name].values, values)


def test_train_rejects_oversized_context():
    episodes = make_episodes(2, num_frames=6)
    model = DynamicsModel(tiny_config(), seed=0)
    config = objective.TrainConfig(total_steps=1, context=6)
    with pytest.raises(ValueError):
        objective.train(model, episodes, [], config)


def test_train_is_byte_deterministic(tmp_path):
    episodes = make_episodes(4)

    def run(tag):
        model = DynamicsModel(tiny_config(), seed=2)
        config = objective.TrainConfig(
            total_steps=5,
            batch_size=2,
            eval_interval=5,
            context=7,
            val_limit=2,
            seed=9,
            deterministic=True,
        )
        out = tmp_path / tag
        objective.train(model, episodes, episodes[:2], config, out_dir=out)
        return (out / "last.ckpt").read_bytes(), (out / "train_log.csv").read_bytes()

    assert run("a") == run("b")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_aborts_on_nonfinite_loss(tmp_path):
    episodes = make_episodes(2)
    model = DynamicsModel(tiny_config(), seed=0)
    # poison only the what columns so alignment still sees finite pres/where
    model.store["head.w2"].values[:, 4:9] = np.inf
    config = objective.TrainConfig(total_steps=3, batch_size=1, eval_interval=0, context=7)
    with pytest.raises(RuntimeError, match="step 1"):
        objective.train(model, episodes, [], config, out_dir=tmp_path)


# -- readout ------------------------------------------------------------------


def test_cross_entropy_uniform_and_peaked():
    logits = T.Tensor(np.zeros((3, 16)))
    labels = np.array([0, 5, 15])
    assert abs(float(objective.cross_entropy(logits, labels).values) - math.log(16.0)) < 1e-12
    peaked = np.full((2, 4), -30.0)
    peaked[0, 2] = 30.0
    peaked[1, 0] = 30.0
    loss = float(objective.cross_entropy(T.Tensor(peaked), np.array([2, 0])).values)
    assert loss < 1e-12


def test_cross_entropy_matches_reference():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 7)) * 3
    labels = rng.integers(0, 7, size=5)
    z = logits - logits.max(axis=1, keepdims=True)
    ref = float(np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(5), labels]))
    got = float(objective.cross_entropy(T.Tensor(logits), labels).values)
    assert abs(got - ref) < 1e-12


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(8)
    values = rng.normal(size=(3, 5))
    labels = np.array([1, 4, 0])
    logits = T.Tensor(values, requires_grad=True)
    with T.Tape() as tape:
        loss = objective.cross_entropy(logits, labels)
        T.backward(loss, tape)
    z = values - values.max(axis=1, keepdims=True)
    soft = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    soft[np.arange(3), labels] -= 1.0
    assert np.allclose(logits.grad, soft / 3.0, atol=1e-12)


def test_untrained_readout_sits_near_chance():
    episodes = make_episodes(32, num_balls=1, num_frames=8)
    model = DynamicsModel(tiny_config(), seed=0).with_readout(cells=16, seed=1)
    report = evaluate.readout_eval(model, episodes)
    assert report.top1 <= 0.35


def test_train_readout_learns_easy_variant(tmp_path):
    episodes = make_episodes(48, num_balls=1, num_frames=8)
    model = DynamicsModel(tiny_config(), seed=0)
    config = objective.ReadoutConfig(
        lr=3e-3,
        total_steps=300,
        batch_size=8,
        eval_interval=100,
        seed=0,
        val_limit=16,
        center_weight=0.5,
    )
    summary = objective.train_readout(model, episodes, episodes[:16], config, out_dir=tmp_path)
    assert (tmp_path / "best_readout.ckpt").exists()
    losses = [row["loss"] for row in summary["history"]]
    assert losses[-1] < 0.5 * math.log(16.0)
    assert summary["best_top1"] >= 0.5
    lines = (tmp_path / "readout_log.csv").read_text().strip().splitlines()
    assert lines[0] == "step,train_loss,val_top1,seconds"


def test_train_readout_rejects_non_square_grid():
    episodes = make_episodes(2, num_balls=1, num_frames=6)
    model = DynamicsModel(tiny_config(), seed=0)
    config = objective.ReadoutConfig(total_steps=1, cells=12)
    with pytest.raises(ValueError):
        objective.train_readout(model, episodes, [], config)
