"""The full pre-training model: encoder pair, shared decoder, point head and projection heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .backbone import (Decoder, EncoderPair, ModelConfig, PointHead, decode, encode_momentum,
                       encode_online, predict_points)
from .diffcore import Tensor
from .geometry import TubeBatch, TubeConfig
from .masking import MaskedSplit, MaskPlan, make_mask, split_embeddings
from .objectives import (LossConfig, LossReport, NegativeQueue, ProjectionHeads, chamfer_loss,
                         disentanglement_probe, global_loss, latent_loss, motion_loss, pool_frames,
                         pool_global, pool_grid_frames, total_loss)
from .params import Module


def grid_for(tube_cfg: TubeConfig, num_frames: int, num_points: int) -> tuple[int, int]:
    return (-(-num_frames // tube_cfg.temporal_stride), num_points // tube_cfg.spatial_stride)


@dataclass
class ForwardOutputs:
    report: LossReport
    split: MaskedSplit
    z_v: Tensor
    z: Tensor
    q: np.ndarray  # (B, C) momentum global features, unit norm
    z_geo: Tensor | None = None
    z_lat: Tensor | None = None
    p_rec: Tensor | None = None


class Pretrainer(Module):
    def __init__(self, model_cfg: ModelConfig, tube_cfg: TubeConfig, grid: tuple[int, int],
                 loss_cfg: LossConfig, seed: int = 0, momentum: float = 0.999):
        rng = np.random.default_rng(seed)
        self.encoders = EncoderPair(model_cfg, rng, momentum,
                                    members=tube_cfg.r_t * tube_cfg.n_neighbors)
        self.decoder = Decoder(model_cfg, grid, rng, latent_token="lat" in loss_cfg.enabled)
        self.point_head = PointHead(model_cfg.width, tube_cfg.r_t, tube_cfg.n_neighbors, rng)
        self.heads = ProjectionHeads(model_cfg.width, rng)
        self._model_cfg = model_cfg
        self._tube_cfg = tube_cfg
        self._grid = grid
        self._loss_cfg = loss_cfg

    @property
    def online(self):
        return self.encoders.online

    @property
    def momentum(self):
        return self.encoders.momentum_encoder

    @property
    def loss_cfg(self) -> LossConfig:
        return self._loss_cfg

    @property
    def grid(self):
        return self._grid

    def trainable(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def forward(self, tubes: TubeBatch, plans: list[MaskPlan], queue: NegativeQueue,
                decode_all: bool = False) -> ForwardOutputs:
        cfg = self._loss_cfg
        enabled = set(cfg.enabled)
        emb = self.online.embed(tubes)
        split = split_embeddings(emb, plans, tubes)
        z_v = encode_online(self.online, split.visible)
        z = encode_momentum(self.momentum, tubes)
        parts: dict[str, Tensor] = {}
        out = ForwardOutputs(LossReport(), split, z_v, z, pool_global(z).data)

        if "geo" in enabled or decode_all:
            out.z_geo = decode(self.decoder, z_v, "geometry", split.masked_anchors, emb.num_frames)
            out.p_rec = predict_points(out.z_geo, self.point_head, split.masked_anchors)
            if "geo" in enabled:
                parts["geo"] = chamfer_loss(out.p_rec, split.ground_truth)
        if "lat" in enabled or decode_all:
            out.z_lat = decode(self.decoder, z_v, "latent", tubes.anchors, emb.num_frames)
            if "lat" in enabled:
                parts["lat"] = latent_loss(out.z_lat, z, self.heads.latent)
        if "motion" in enabled:
            h_v = pool_frames(z_v, split.visible_frames, self._grid[0])
            h = pool_grid_frames(z, self._grid)
            parts["motion"] = motion_loss(h_v, h, self.heads, cfg)
        if "global" in enabled:
            parts["global"] = global_loss(pool_global(z_v), Tensor(out.q, dtype=z_v.dtype),
                                          queue.entries(), self.heads, cfg)
        out.report = total_loss(parts, enabled)
        return out

    def probe_disentanglement(self, tubes: TubeBatch, plans: list[MaskPlan]) -> float:
        with dc.no_grad():
            emb = self.online.embed(tubes)
            split = split_embeddings(emb, plans, tubes)
            z_v = encode_online(self.online, split.visible)
            z_geo = decode(self.decoder, z_v, "geometry", split.masked_anchors, emb.num_frames)
            z_lat = decode(self.decoder, z_v, "latent", tubes.anchors, emb.num_frames)
        return disentanglement_probe(z_geo, z_lat, split.masked_index)


def plans_for(tubes: TubeBatch, strategy: str, ratio: float, seeds: list[int],
              block_size: int | None = None) -> list[MaskPlan]:
    grid = tubes.anchors.shape[-3:-1]
    return [make_mask(grid, strategy, ratio, s, anchors=tubes.anchors[b], block_size=block_size)
            for b, s in enumerate(seeds)]
