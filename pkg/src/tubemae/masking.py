"""Visible / masked partitions of the tube grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .embedding import EmbeddingBatch
from .errors import ContractError
from .geometry import TubeBatch

STRATEGIES = ("frame", "video", "block")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class MaskPlan:
    strategy: str
    ratio: float
    visible: np.ndarray  # (L', N') bool
    seed: int
    clusters: list[list[np.ndarray]] = field(default_factory=list)  # block strategy, per frame

    @property
    def shape(self) -> tuple[int, int]:
        return self.visible.shape

    @property
    def visible_count(self) -> int:
        return int(self.visible.sum())


def visible_per_frame(n_anchor: int, ratio: float) -> int:
    return round_half_up(n_anchor * (1.0 - ratio))


def make_mask(shape: tuple[int, int], strategy: str = "frame", ratio: float = 0.75,
              seed: int = 0, anchors: np.ndarray | None = None,
              block_size: int | None = None) -> MaskPlan:
    """Build a mask plan; ``anchors`` (L', N', >=3) are required for block masking."""
    if not 0 < ratio < 1:
        raise ContractError(f"mask ratio must lie in (0, 1), got {ratio}")
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown mask strategy {strategy!r}")
    n_frames, n_anchor = shape
    rng = np.random.default_rng(seed)
    visible = np.zeros(shape, dtype=bool)
    clusters: list[list[np.ndarray]] = []

    if strategy == "video":
        total = round_half_up(n_frames * n_anchor * (1.0 - ratio))
        if total < 1:
            raise ContractError(f"ratio {ratio} leaves no visible tubes")
        visible.reshape(-1)[rng.choice(n_frames * n_anchor, size=total, replace=False)] = True
        return MaskPlan(strategy, ratio, visible, seed)

    n_vis = visible_per_frame(n_anchor, ratio)
    if n_vis < 1:
        raise ContractError(f"ratio {ratio} leaves no visible tube in a frame of {n_anchor}")

    if strategy == "frame":
        for t in range(n_frames):
            visible[t, rng.choice(n_anchor, size=n_vis, replace=False)] = True
        return MaskPlan(strategy, ratio, visible, seed)

    if anchors is None:
        raise ContractError("block masking needs anchor coordinates")
    quota = n_anchor - n_vis
    size = block_size or max(1, math.ceil(quota / 2))
    visible[:] = True
    for t in range(n_frames):
        xyz = np.asarray(anchors[t, :, :3], dtype=np.float64)
        frame_clusters = []
        masked = 0
        while masked < quota:
            free = np.flatnonzero(visible[t])
            seed_anchor = int(rng.choice(free))
            d2 = np.sum((xyz[free] - xyz[seed_anchor]) ** 2, axis=1)
            order = free[np.lexsort((free, d2))]
            take = order[: min(size, quota - masked)]
            visible[t, take] = False
            masked += len(take)
            frame_clusters.append(take)
        clusters.append(frame_clusters)
    return MaskPlan(strategy, ratio, visible, seed, clusters)


@dataclass
class MaskedSplit:
    """Flattened visible tokens of a batch plus everything needed downstream.

    Grid positions are flat indices ``frame * N' + anchor``.
    """

    visible: EmbeddingBatch  # embeddings (B, T_v, C), anchors (B, T_v, 4)
    visible_index: np.ndarray  # (B, T_v)
    masked_index: np.ndarray  # (B, T_m)
    masked_anchors: np.ndarray  # (B, T_m, 4)
    ground_truth: np.ndarray  # (B, T_m, r_t, k, 3)
    grid_shape: tuple[int, int]

    @property
    def visible_frames(self) -> np.ndarray:
        return self.visible_index // self.grid_shape[1]

    @property
    def masked_positions(self) -> np.ndarray:
        """(B, T_m, 2) array of (frame, anchor) pairs."""
        n = self.grid_shape[1]
        return np.stack([self.masked_index // n, self.masked_index % n], axis=-1)


def split_embeddings(batch: EmbeddingBatch, plans: MaskPlan | list[MaskPlan],
                     tubes: TubeBatch) -> MaskedSplit:
    """Gather visible embeddings and the reconstruction targets of masked tubes.

    ``batch`` and ``tubes`` carry a leading batch axis; one plan per batch item.
    """
    if isinstance(plans, MaskPlan):
        plans = [plans]
    emb = batch.embeddings
    B, Lp, Np, C = emb.shape
    if len(plans) != B:
        raise ContractError(f"{len(plans)} plans for a batch of {B}")
    vis_idx, mask_idx = [], []
    for p in plans:
        if p.shape != (Lp, Np):
            raise ContractError(f"plan shape {p.shape} does not match grid {(Lp, Np)}")
        flat = p.visible.reshape(-1)
        vis_idx.append(np.flatnonzero(flat))
        mask_idx.append(np.flatnonzero(~flat))
    if len({len(v) for v in vis_idx}) != 1:
        raise ContractError("plans in one batch must keep the same number of visible tubes")
    vis_idx = np.stack(vis_idx)
    mask_idx = np.stack(mask_idx)
    offs = (np.arange(B) * Lp * Np)[:, None]
    flat_emb = dc.reshape(emb, (B * Lp * Np, C))
    visible = dc.take(flat_emb, vis_idx + offs, axis=0)  # (B, T_v, C)
    anchors = batch.anchors.reshape(B, Lp * Np, 4)
    b = np.arange(B)[:, None]
    gt = tubes.ground_truth.reshape((B, Lp * Np) + tubes.ground_truth.shape[-3:])
    return MaskedSplit(
        visible=EmbeddingBatch(visible, anchors[b, vis_idx], batch.num_frames),
        visible_index=vis_idx,
        masked_index=mask_idx,
        masked_anchors=anchors[b, mask_idx],
        ground_truth=gt[b, mask_idx],
        grid_shape=(Lp, Np),
    )


def flatten_grid(batch: EmbeddingBatch) -> Tensor:
    B, Lp, Np, C = batch.embeddings.shape
    return dc.reshape(batch.embeddings, (B, Lp * Np, C))
