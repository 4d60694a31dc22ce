import copy

import numpy as np
import pytest

from tubemae import diffcore as dc
from tubemae.checkpoint import config_hash
from tubemae.dataio import Sample, default_classes, synthetic_dataset, synthetic_segmentation_dataset
from tubemae.diffcore import Tensor
from tubemae.errors import ContractError, FormatError
from tubemae.objectives import LossConfig
from tubemae.optim import AdamW, SGD, lr_at
from tubemae.params import state_hash
from tubemae.pipeline import (ClipConfig, EvalConfig, MaskConfig, TrainConfig, build_pretrainer,
                              checkpoint_bytes, clip_batch, encoder_from_tensors, fewshot_split,
                              linear_probe, pretrain, pretrain_step, restore_state,
                              segmentation_head_finetune, state_tensors, stratified_fraction)
from tubemae.checkpoint import decode_checkpoint
from tubemae.metrics import frame_accuracy

from conftest import TINY_MODEL, TINY_TUBE

CLIP = ClipConfig(frames=8, stride=1, scale_lo=0.9, scale_hi=1.1)
POINTS = 64
TRAIN = TrainConfig(epochs=2, batch_size=4, warmup_epochs=1, base_lr=1e-3)
HASH = config_hash("tiny")


@pytest.fixture(scope="module")
def samples():
    return synthetic_dataset(default_classes()[:3], 4, 8, POINTS, seed=0)


def tiny_state(loss=LossConfig(queue_size=4), train=TRAIN):
    return build_pretrainer(TINY_MODEL, TINY_TUBE, CLIP, POINTS, loss, train)


def test_lr_schedule_examples():
    assert lr_at(0, 100, 10, 1.0) == 0.0
    assert lr_at(10, 100, 10, 1.0) == pytest.approx(1.0)
    assert lr_at(5, 100, 10, 1.0) == pytest.approx(0.5)
    assert lr_at(100, 100, 10, 1.0) <= 1e-6
    assert lr_at(55, 100, 10, 1.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        lr_at(-1, 100, 10, 1.0)


def test_train_config_invariants():
    with pytest.raises(ContractError):
        TrainConfig(epochs=2, warmup_epochs=2)
    with pytest.raises(ContractError):
        TrainConfig(base_lr=0.0)


@pytest.mark.parametrize("kind", [AdamW, SGD])
def test_zero_gradient_step_is_pure_decoupled_decay(kind, rng):
    w = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=4))
    token = Tensor(rng.normal(size=(1, 4)))
    params = {"w": w, "b": b, "geo_token": token}
    before = {n: p.data.copy() for n, p in params.items()}
    for p in params.values():
        p.grad = np.zeros_like(p.data)
    kind(params, weight_decay=0.1).step(0.5)
    np.testing.assert_allclose(w.data, before["w"] * (1 - 0.5 * 0.1), rtol=1e-6)
    np.testing.assert_array_equal(b.data, before["b"])
    np.testing.assert_array_equal(token.data, before["geo_token"])


def test_adamw_first_step_moves_by_lr_times_sign():
    p = Tensor(np.array([[1.0, -2.0]]))
    p.grad = np.array([[3.0, -0.5]])
    AdamW({"p": p}, weight_decay=0.0).step(0.01)
    np.testing.assert_allclose(p.data, [[0.99, -1.99]], rtol=1e-6)


def test_checkpoint_round_trip_is_bit_exact(samples):
    state = tiny_state()
    pretrain(state, samples, CLIP, TINY_TUBE, MaskConfig(), TRAIN, max_steps=2)
    buf = checkpoint_bytes(state, HASH)
    fresh = tiny_state(train=TrainConfig(epochs=2, warmup_epochs=1, seed=9))
    assert restore_state(fresh, buf) == HASH
    a, b = state_tensors(state), state_tensors(fresh)
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes(), k
    assert fresh.step == state.step == 2
    assert checkpoint_bytes(fresh, HASH) == buf
    enc = encoder_from_tensors(decode_checkpoint(buf)[0], TINY_MODEL)
    assert state_hash(enc.state_dict()) == state_hash(state.model.online.state_dict())


def test_checkpoint_corruption_is_reported_with_offset():
    state = tiny_state()
    buf = checkpoint_bytes(state, HASH)
    with pytest.raises(FormatError, match="truncated") as info:
        decode_checkpoint(buf[:-3])
    assert info.value.offset > 0
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(buf + b"\0")
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(b"XXXX" + buf[4:])


def test_step_order_ema_after_optimizer_then_queue(samples):
    state = tiny_state()
    tubes, _ = clip_batch(samples[:2], CLIP, TINY_TUBE, seed=3)
    seen, snap = [], {}
    m = state.model.encoders.m

    def hook(event, state, report, **kw):
        seen.append(event)
        if event == "after_optimizer":
            snap["online"] = {n: p.data.copy() for n, p in state.model.online.named_parameters()}
            snap["momentum"] = {n: p.data.copy() for n, p in state.model.momentum.named_parameters()}
            snap["fill"] = len(state.queue)
        elif event == "after_ema":
            for n, p in state.model.momentum.named_parameters():
                old, src = snap["momentum"][n].astype(np.float64), snap["online"][n].astype(np.float64)
                want = (m * old + (1 - m) * src).astype(p.dtype)
                np.testing.assert_array_equal(p.data, want)
            assert len(state.queue) == snap["fill"]
        else:
            np.testing.assert_array_equal(state.queue.entries()[-2:], kw["q"].astype(np.float32))

    for _ in range(2):
        pretrain_step(state, tubes, MaskConfig(), 1e-3, 0, hook)
    assert seen == ["after_optimizer", "after_ema", "after_queue"] * 2
    # the first EMA must see post-step online weights, so the encoders already differ
    assert state_hash(state.model.online.state_dict()) != state_hash(state.model.momentum.state_dict())


def test_same_seed_replays_bitwise(samples):
    runs = []
    for _ in range(2):
        state = tiny_state()
        pretrain(state, samples, CLIP, TINY_TUBE, MaskConfig(), TRAIN)
        runs.append((state.history, checkpoint_bytes(state, HASH)))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]


def test_geo_only_gradients_reach_reconstruction_path(samples):
    state = tiny_state(LossConfig.preset("B1", queue_size=4))
    tubes, _ = clip_batch(samples[:2], CLIP, TINY_TUBE, seed=3)
    from tubemae.model import plans_for
    model = state.model
    model.zero_grad()
    out = model.forward(tubes, plans_for(tubes, "frame", 0.75, [0, 1]), state.queue)
    dc.backward(out.report.total_tensor)
    touched = {n for n, p in model.named_parameters() if p.grad is not None}
    assert out.report.total == out.report.geo
    assert "decoder.geo_token" in touched and "point_head.weight" in touched
    assert any(n.startswith("encoders.online.") for n in touched)
    assert "decoder.lat_tokens" not in touched
    assert not any(n.startswith("heads.") for n in touched)
    assert all(p.grad is None for p in model.momentum.parameters())


def test_linear_probe_leaves_encoder_untouched(samples):
    enc = tiny_state().model.online
    before = state_hash(enc.state_dict())
    train = [s for s in samples if s.split == "train"]
    test = [s for s in samples if s.split == "test"]
    acc = linear_probe(enc, train, test, CLIP, TINY_TUBE, EvalConfig(probe_steps=20))
    assert 0 <= acc <= 100
    assert state_hash(enc.state_dict()) == before
    unlabeled = [Sample(copy.copy(test[0].video), "test")]
    unlabeled[0].video.label = None
    with pytest.raises(ContractError):
        linear_probe(enc, train, unlabeled, CLIP, TINY_TUBE, EvalConfig(probe_steps=1))


def test_label_shuffled_probe_sits_at_chance():
    """Permutation oracle: with labels shuffled, mean probe accuracy over 20 shuffles is 1/3 +- 5 points."""
    data = synthetic_dataset(default_classes()[:3], 40, 8, POINTS, 0, {"train": 0.5, "test": 0.5})
    enc = tiny_state().model.online
    accs = []
    for p in range(20):
        perm = np.random.default_rng(p).permutation([s.label for s in data])
        shuffled = [Sample(copy.copy(s.video), s.split) for s in data]
        for s, label in zip(shuffled, perm):
            s.video.label = int(label)
        train = [s for s in shuffled if s.split == "train"]
        test = [s for s in shuffled if s.split == "test"]
        accs.append(linear_probe(enc, train, test, CLIP, TINY_TUBE, EvalConfig(probe_steps=200)))
    assert abs(np.mean(accs) - 100 / 3) <= 5


def test_stratified_fraction_counts():
    data = synthetic_dataset(default_classes()[:3], 20, 4, 8, seed=0, ratios={"train": 1.0})
    half = stratified_fraction(data, 0.5, seed=1)
    assert len(half) == 30
    assert np.bincount([s.label for s in half]).tolist() == [10, 10, 10]
    assert stratified_fraction(data, 1.0, seed=1) == data
    with pytest.raises(ContractError):
        stratified_fraction(data, 0.0, seed=1)


@pytest.mark.parametrize("n_way,m_shot", [(5, 1), (3, 4)])
def test_fewshot_split_counts_and_disjointness(n_way, m_shot):
    data = synthetic_dataset(default_classes(), 6, 4, 8, seed=0, ratios={"train": 1.0})
    for seed in range(50):
        train, held = fewshot_split(data, n_way, m_shot, seed)
        assert len(train) == n_way * m_shot
        labels = [s.label for s in train]
        assert sorted(set(labels)) == sorted({s.label for s in held})
        assert all(labels.count(c) == m_shot for c in set(labels))
        assert not {id(s) for s in train} & {id(s) for s in held}
        assert len(held) == n_way * (6 - m_shot)
    with pytest.raises(ContractError):
        fewshot_split(data, 7, 1, 0)
    with pytest.raises(ContractError):
        fewshot_split(data, 2, 6, 0)


def test_segmentation_overfits_two_videos():
    data = synthetic_segmentation_dataset(default_classes()[:3], 2, 8, POINTS, seed=0, segments=2,
                                          ratios={"train": 1.0})
    enc = tiny_state().model.online
    cfg = EvalConfig(epochs=60, batch_size=2, warmup_epochs=2, base_lr=1e-2)
    clip = ClipConfig(8, 1, 1.0, 1.0)
    res = segmentation_head_finetune(enc, data, data, clip, TINY_TUBE, 3, cfg)
    assert [len(p) for p in res.predictions] == [4, 4]
    assert res.history[-1]["loss"] < res.history[0]["loss"]
    assert np.mean([frame_accuracy(p, t) for p, t in zip(res.predictions, res.targets)]) == 100.0
