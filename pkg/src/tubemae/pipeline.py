"""Pre-training and the downstream evaluation protocols."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .backbone import Encoder, ModelConfig, ema_update
from .checkpoint import decode_checkpoint, encode_checkpoint
from .dataio import Sample
from .diffcore import Tensor
from .errors import ContractError, NumericError
from .geometry import (PointCloudVideo, TubeBatch, TubeConfig, augment_scale, build_tubes,
                       collate_tubes, sample_frames)
from .masking import flatten_grid
from .metrics import classification_report
from .model import Pretrainer, grid_for, plans_for
from .objectives import LossConfig, LossReport, NegativeQueue
from .optim import lr_at, make_optimizer
from .params import Module, xavier, zeros

log = logging.getLogger(__name__)


def substream(seed: int, name: str, *extra: int) -> int:
    """Named, reproducible child seed of the master seed."""
    key = [seed & 0xFFFFFFFF, zlib.crc32(name.encode()), *[int(e) & 0xFFFFFFFF for e in extra]]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


@dataclass(frozen=True)
class ClipConfig:
    frames: int = 24
    stride: int = 1
    scale_lo: float = 0.9
    scale_hi: float = 1.1


@dataclass(frozen=True)
class MaskConfig:
    strategy: str = "frame"
    ratio: float = 0.75
    block_size: int = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    base_lr: float = 3e-4
    weight_decay: float = 5e-2
    warmup_epochs: int = 2
    optimizer: str = "adamw"
    seed: int = 0
    momentum: float = 0.999

    def __post_init__(self):
        if not self.warmup_epochs < self.epochs:
            raise ContractError("warmup_epochs must be smaller than epochs")
        if not self.base_lr > 0:
            raise ContractError("learning rate must be positive")


@dataclass
class PretrainState:
    model: Pretrainer
    queue: NegativeQueue
    optimizer: object
    step: int = 0
    history: list[dict] = field(default_factory=list)


def clip_batch(samples: list[Sample], clip: ClipConfig, tube_cfg: TubeConfig, seed: int,
               augment: bool = True) -> tuple[TubeBatch, list[PointCloudVideo]]:
    """Temporal sampling, random scaling and tube construction for a batch."""
    videos, tubes = [], []
    for i, s in enumerate(samples):
        v = sample_frames(s.video, clip.frames, clip.stride, substream(seed, "frames", i))
        if augment:
            v = augment_scale(v, clip.scale_lo, clip.scale_hi, substream(seed, "scale", i))
        videos.append(v)
        tubes.append(build_tubes(v, tube_cfg, substream(seed, "fps", i)))
    return collate_tubes(tubes), videos


def build_pretrainer(model_cfg: ModelConfig, tube_cfg: TubeConfig, clip: ClipConfig,
                     num_points: int, loss_cfg: LossConfig, train: TrainConfig) -> PretrainState:
    grid = grid_for(tube_cfg, clip.frames, num_points)
    model = Pretrainer(model_cfg, tube_cfg, grid, loss_cfg, substream(train.seed, "init"),
                       momentum=train.momentum)
    queue = NegativeQueue(loss_cfg.queue_size, model_cfg.width, dtype=dc.default_dtype())
    opt = make_optimizer(train.optimizer, model.trainable(), train.weight_decay)
    return PretrainState(model, queue, opt)


def pretrain_step(state: PretrainState, tubes: TubeBatch, mask: MaskConfig, lr: float,
                  mask_seed: int, hook: Callable | None = None) -> LossReport:
    model = state.model
    plans = plans_for(tubes, mask.strategy, mask.ratio,
                      [substream(mask_seed, "mask", b) for b in range(tubes.anchors.shape[0])],
                      mask.block_size or None)
    model.zero_grad()
    out = model.forward(tubes, plans, state.queue)
    report = out.report
    if not np.isfinite(report.total):
        raise NumericError(f"non-finite loss at step {state.step}: {report.as_dict()}")
    dc.backward(report.total_tensor)
    state.optimizer.step(lr)
    if hook:
        hook("after_optimizer", state=state, report=report)
    ema_update(model.encoders)
    if hook:
        hook("after_ema", state=state, report=report)
    state.queue.push(out.q)
    if hook:
        hook("after_queue", state=state, report=report, q=out.q)
    state.step += 1
    return report


def pretrain(state: PretrainState, train_samples: list[Sample], clip: ClipConfig,
             tube_cfg: TubeConfig, mask: MaskConfig, train: TrainConfig,
             hook: Callable | None = None, epoch_callback: Callable | None = None,
             max_steps: int | None = None) -> list[dict]:
    n = len(train_samples)
    steps_per_epoch = -(-n // train.batch_size)
    total = steps_per_epoch * train.epochs
    warm = steps_per_epoch * train.warmup_epochs
    for epoch in range(len(state.history), train.epochs):
        order = np.random.default_rng(substream(train.seed, "shuffle", epoch)).permutation(n)
        reports = []
        for s in range(steps_per_epoch):
            if max_steps is not None and state.step >= max_steps:
                return state.history
            idx = order[s * train.batch_size:(s + 1) * train.batch_size]
            step_seed = substream(train.seed, "sampling", state.step)
            tubes, _ = clip_batch([train_samples[i] for i in idx], clip, tube_cfg, step_seed)
            lr = lr_at(state.step, total, warm, train.base_lr)
            reports.append(pretrain_step(state, tubes, mask, lr,
                                         substream(train.seed, "mask", state.step), hook))
        row = {"epoch": epoch + 1, "lr": lr}
        for key in ("geo", "lat", "motion", "global", "total"):
            row[key] = float(np.mean([r.as_dict()[key] for r in reports]))
        state.history.append(row)
        log.info("epoch %d total %.4f geo %.4f lat %.4f motion %.4f global %.4f", row["epoch"],
                 row["total"], row["geo"], row["lat"], row["motion"], row["global"])
        if epoch_callback:
            epoch_callback(row)
    return state.history


# ---------------------------------------------------------------- checkpoints


def state_tensors(state: PretrainState) -> dict[str, np.ndarray]:
    model = state.model
    out = {f"param/{k}": v for k, v in model.state_dict().items()}
    out.update({f"momentum/{k}": v for k, v in model.encoders.momentum_state().items()})
    out["queue/buffer"] = state.queue.buffer.copy()
    out["queue/meta"] = np.array([state.queue.cursor, state.queue.fill, state.optimizer.t], dtype=np.int64)
    out.update({f"opt/{k}": v for k, v in state.optimizer.state().items()})
    return out


def checkpoint_bytes(state: PretrainState, cfg_hash: bytes) -> bytes:
    return encode_checkpoint(state_tensors(state), state.step, cfg_hash)


def restore_state(state: PretrainState, buf: bytes) -> bytes:
    tensors, step, cfg_hash = decode_checkpoint(buf)
    pick = lambda prefix: {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}  # noqa: E731
    state.model.load_state_dict(pick("param/"))
    state.model.encoders.load_momentum_state(pick("momentum/"))
    state.queue.buffer = tensors["queue/buffer"].copy()
    cursor, fill, t = tensors["queue/meta"].tolist()
    state.queue.cursor, state.queue.fill = cursor, fill
    state.optimizer.load_state(pick("opt/"), t)
    state.step = step
    return cfg_hash


def encoder_from_tensors(tensors: dict[str, np.ndarray], model_cfg: ModelConfig) -> Encoder:
    """Rebuild the online encoder from a checkpoint, discarding decoder and heads."""
    enc = Encoder(model_cfg, np.random.default_rng(0))
    prefix = "param/encoders.online."
    enc.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    return enc


# ---------------------------------------------------------------- downstream


class Classifier(Module):
    def __init__(self, width: int, classes: int, rng: np.random.Generator):
        self.weight = xavier(rng, width, classes)
        self.bias = zeros(classes)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.linear(x, self.weight, self.bias)


@dataclass(frozen=True)
class EvalConfig:
    epochs: int = 20
    batch_size: int = 8
    base_lr: float = 5e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 2
    optimizer: str = "adamw"
    probe_steps: int = 500
    probe_lr: float = 1e-2
    seed: int = 0


def _encode_tokens(encoder: Encoder, tubes: TubeBatch) -> Tensor:
    return encoder.encode(flatten_grid(encoder.embed(tubes)))


def _eval_clips(samples, clip, tube_cfg, seed):
    """Deterministic, unaugmented clips used for every evaluation pass."""
    return clip_batch(samples, clip, tube_cfg, substream(seed, "eval"), augment=False)[0]


def extract_features(encoder: Encoder, samples: list[Sample], clip: ClipConfig,
                     tube_cfg: TubeConfig, seed: int = 0, batch_size: int = 16) -> np.ndarray:
    """Max-pooled encoder tokens per video, computed without gradients."""
    feats = []
    with dc.no_grad():
        for i in range(0, len(samples), batch_size):
            tubes = _eval_clips(samples[i:i + batch_size], clip, tube_cfg, seed)
            feats.append(dc.max(_encode_tokens(encoder, tubes), axis=1).data)
    return np.concatenate(feats).astype(np.float64)


def _labels(samples: list[Sample]) -> np.ndarray:
    labels = [s.video.label for s in samples]
    if any(label is None for label in labels):
        raise ContractError("every sample needs a video label")
    return np.asarray(labels, dtype=np.int64)


def linear_probe(encoder: Encoder, train: list[Sample], test: list[Sample], clip: ClipConfig,
                 tube_cfg: TubeConfig, cfg: EvalConfig = EvalConfig(),
                 num_classes: int | None = None) -> float:
    """Train one linear layer on frozen max-pooled features; returns test accuracy in percent."""
    y_tr, y_te = _labels(train), _labels(test)
    k = num_classes or int(max(y_tr.max(), y_te.max()) + 1)
    x_tr = extract_features(encoder, train, clip, tube_cfg, cfg.seed)
    x_te = extract_features(encoder, test, clip, tube_cfg, cfg.seed)
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0) + 1e-6
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd
    with dc.precision(np.float64):
        clf = Classifier(x_tr.shape[1], k, np.random.default_rng(substream(cfg.seed, "probe")))
        opt = make_optimizer("adamw", dict(clf.named_parameters()), cfg.weight_decay)
        xt = Tensor(x_tr)
        for _ in range(cfg.probe_steps):
            clf.zero_grad()
            dc.backward(dc.cross_entropy(clf(xt), y_tr))
            opt.step(cfg.probe_lr)
        pred = np.argmax(clf(Tensor(x_te)).data, axis=1)
    return classification_report(pred, y_te)


def stratified_fraction(samples: list[Sample], fraction: float, seed: int) -> list[Sample]:
    if not 0 < fraction <= 1:
        raise ContractError("fraction must lie in (0, 1]")
    if fraction == 1:
        return list(samples)
    labels = _labels(samples)
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n = int(np.floor(fraction * len(idx) + 0.5))
        keep.extend(rng.choice(idx, size=n, replace=False).tolist())
    return [samples[i] for i in sorted(keep)]


@dataclass
class FinetuneResult:
    accuracy: float
    history: list[dict]
    encoder: Encoder
    classifier: Module


def finetune(encoder: Encoder, train: list[Sample], test: list[Sample], clip: ClipConfig,
             tube_cfg: TubeConfig, cfg: EvalConfig = EvalConfig(), fraction: float = 1.0,
             num_classes: int | None = None) -> FinetuneResult:
    """End-to-end training of encoder + linear classifier on max-pooled tokens."""
    train = stratified_fraction(train, fraction, substream(cfg.seed, "fraction"))
    y_tr, y_te = _labels(train), _labels(test)
    k = num_classes or int(max(y_tr.max(), y_te.max()) + 1)
    encoder = encoder.clone()
    encoder.set_requires_grad(True)
    clf = Classifier(encoder.p4d.width, k, np.random.default_rng(substream(cfg.seed, "classifier")))
    params = {f"enc.{n}": p for n, p in encoder.named_parameters()}
    params.update({f"clf.{n}": p for n, p in clf.named_parameters()})
    opt = make_optimizer(cfg.optimizer, params, cfg.weight_decay)
    steps_per_epoch = -(-len(train) // cfg.batch_size)
    total, warm = steps_per_epoch * cfg.epochs, steps_per_epoch * cfg.warmup_epochs
    history, step = [], 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(substream(cfg.seed, "ft-shuffle", epoch)).permutation(len(train))
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            tubes, _ = clip_batch([train[i] for i in idx], clip, tube_cfg,
                                  substream(cfg.seed, "ft-sampling", step))
            for p in params.values():
                p.grad = None
            logits = clf(dc.max(_encode_tokens(encoder, tubes), axis=1))
            loss = dc.cross_entropy(logits, y_tr[idx])
            dc.backward(loss)
            opt.step(lr_at(step, total, warm, cfg.base_lr))
            losses.append(loss.item())
            step += 1
        acc = _classify_accuracy(encoder, clf, test, y_te, clip, tube_cfg, cfg.seed)
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)), "accuracy": acc})
    return FinetuneResult(history[-1]["accuracy"], history, encoder, clf)


def _classify_accuracy(encoder, clf, samples, labels, clip, tube_cfg, seed) -> float:
    preds = []
    with dc.no_grad():
        for i in range(0, len(samples), 16):
            tubes = _eval_clips(samples[i:i + 16], clip, tube_cfg, seed)
            preds.append(np.argmax(clf(dc.max(_encode_tokens(encoder, tubes), axis=1)).data, axis=1))
    return classification_report(np.concatenate(preds), labels)


def fewshot_split(samples: list[Sample], n_way: int, m_shot: int, seed: int
                  ) -> tuple[list[Sample], list[Sample]]:
    """Pick ``n_way`` classes, ``m_shot`` training videos each; the rest of those classes is eval."""
    labels = _labels(samples)
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= m_shot + 1]
    if len(eligible) < n_way:
        raise ContractError(f"only {len(eligible)} classes have >= {m_shot + 1} videos; need {n_way}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(eligible, size=n_way, replace=False))
    train_idx, eval_idx = [], []
    for c in chosen:
        idx = rng.permutation(np.flatnonzero(labels == c))
        train_idx.extend(idx[:m_shot].tolist())
        eval_idx.extend(idx[m_shot:].tolist())
    return [samples[i] for i in sorted(train_idx)], [samples[i] for i in sorted(eval_idx)]


# ---------------------------------------------------------------- segmentation


def anchor_frame_labels(videos: list[PointCloudVideo], tube_cfg: TubeConfig) -> np.ndarray:
    return np.stack([v.frame_labels[::tube_cfg.temporal_stride] for v in videos])


def _frame_logits(encoder: Encoder, clf: Classifier, tubes: TubeBatch) -> Tensor:
    emb = encoder.embed(tubes)
    B, Lp, Np, C = emb.embeddings.shape
    z = encoder.encode(dc.reshape(emb.embeddings, (B, Lp * Np, C)))
    return clf(dc.max(dc.reshape(z, (B, Lp, Np, C)), axis=2))  # (B, L', K)


@dataclass
class SegmentationResult:
    predictions: list[np.ndarray]
    targets: list[np.ndarray]
    history: list[dict]


def segmentation_head_finetune(encoder: Encoder, train: list[Sample], test: list[Sample],
                               clip: ClipConfig, tube_cfg: TubeConfig, num_classes: int,
                               cfg: EvalConfig = EvalConfig()) -> SegmentationResult:
    """Per-frame classifier on spatially pooled tokens, trained end to end."""
    for s in train + test:
        if s.video.frame_labels is None:
            raise ContractError("segmentation needs per-frame labels")
    encoder = encoder.clone()
    encoder.set_requires_grad(True)
    clf = Classifier(encoder.p4d.width, num_classes,
                     np.random.default_rng(substream(cfg.seed, "seg-classifier")))
    params = {f"enc.{n}": p for n, p in encoder.named_parameters()}
    params.update({f"clf.{n}": p for n, p in clf.named_parameters()})
    opt = make_optimizer(cfg.optimizer, params, cfg.weight_decay)
    steps_per_epoch = -(-len(train) // cfg.batch_size)
    total, warm = steps_per_epoch * cfg.epochs, steps_per_epoch * cfg.warmup_epochs
    history, step = [], 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(substream(cfg.seed, "seg-shuffle", epoch)).permutation(len(train))
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            tubes, videos = clip_batch([train[i] for i in idx], clip, tube_cfg,
                                       substream(cfg.seed, "seg-sampling", step))
            y = anchor_frame_labels(videos, tube_cfg)
            for p in params.values():
                p.grad = None
            logits = _frame_logits(encoder, clf, tubes)
            B, Lp, K = logits.shape
            loss = dc.cross_entropy(dc.reshape(logits, (B * Lp, K)), y.reshape(-1))
            dc.backward(loss)
            opt.step(lr_at(step, total, warm, cfg.base_lr))
            losses.append(loss.item())
            step += 1
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses))})
    preds, targets = [], []
    with dc.no_grad():
        for i in range(0, len(test), 16):
            chunk = test[i:i + 16]
            tubes, videos = clip_batch(chunk, clip, tube_cfg, substream(cfg.seed, "eval"), augment=False)
            logits = _frame_logits(encoder, clf, tubes).data
            preds.extend(np.argmax(logits, axis=-1))
            targets.extend(anchor_frame_labels(videos, tube_cfg))
    return SegmentationResult(preds, targets, history)
