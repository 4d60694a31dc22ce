"""Spatio-temporal transformer encoders, the shared token decoder and the point head."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .embedding import EmbeddingBatch, P4DKernel, PositionalMap, p4d_embed, positional_encode
from .errors import ContractError
from .geometry import TubeBatch
from .params import Module, ones, trunc_normal, zeros


@dataclass(frozen=True)
class ModelConfig:
    width: int = 128
    depth: int = 5
    heads: int = 8
    decoder_depth: int = 4
    decoder_heads: int = 8
    mlp_ratio: int = 4
    in_features: int = 0
    aggregation: str = "literal-sum"

    def __post_init__(self):
        if self.width % self.heads or self.width % self.decoder_heads:
            raise ContractError(f"width {self.width} must be divisible by the head counts")


class TransformerLayer(Module):
    """Pre-norm block: f = MSA(LN(z)) + z ; z' = MLP(LN(f)) + f."""

    def __init__(self, width: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        if width % heads:
            raise ContractError(f"width {width} not divisible by {heads} heads")
        hidden = width * mlp_ratio
        self.ln1_g, self.ln1_b = ones(width), zeros(width)
        self.qkv_w, self.qkv_b = trunc_normal(rng, (width, 3 * width)), zeros(3 * width)
        self.proj_w, self.proj_b = trunc_normal(rng, (width, width)), zeros(width)
        self.ln2_g, self.ln2_b = ones(width), zeros(width)
        self.fc1_w, self.fc1_b = trunc_normal(rng, (width, hidden)), zeros(hidden)
        self.fc2_w, self.fc2_b = trunc_normal(rng, (hidden, width)), zeros(width)
        self._heads = heads
        self.capture = False
        self._attention: np.ndarray | None = None

    def attention(self, x: Tensor) -> Tensor:
        B, T, C = x.shape
        H = self._heads
        D = C // H
        qkv = dc.linear(x, self.qkv_w, self.qkv_b)
        qkv = dc.transpose(dc.reshape(qkv, (B, T, 3, H, D)), (2, 0, 3, 1, 4))  # (3, B, H, T, D)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(D))
        weights = dc.softmax(scores, axis=-1)
        if self.capture:
            self._attention = weights.data.copy()
        out = dc.transpose(dc.matmul(weights, v), (0, 2, 1, 3))
        return dc.linear(dc.reshape(out, (B, T, C)), self.proj_w, self.proj_b)

    def __call__(self, z: Tensor) -> Tensor:
        f = self.attention(dc.layernorm(z, self.ln1_g, self.ln1_b)) + z
        h = dc.gelu(dc.linear(dc.layernorm(f, self.ln2_g, self.ln2_b), self.fc1_w, self.fc1_b))
        return dc.linear(h, self.fc2_w, self.fc2_b) + f


class TransformerStack(Module):
    def __init__(self, width, depth, heads, mlp_ratio, rng):
        self.layers = [TransformerLayer(width, heads, mlp_ratio, rng) for _ in range(depth)]

    def __call__(self, z: Tensor) -> Tensor:
        for layer in self.layers:
            z = layer(z)
        return z

    def set_capture(self, flag: bool):
        for layer in self.layers:
            layer.capture = flag
            layer._attention = None


class Encoder(Module):
    """Tube embedding, anchor positional map and the transformer stack."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, members: int = 1):
        self.p4d = P4DKernel(cfg.width, cfg.in_features, cfg.aggregation, rng=rng, members=members)
        self.pos = PositionalMap(cfg.width, rng=rng)
        self.blocks = TransformerStack(cfg.width, cfg.depth, cfg.heads, cfg.mlp_ratio, rng)

    def embed(self, tubes: TubeBatch) -> EmbeddingBatch:
        return positional_encode(p4d_embed(tubes, self.p4d), self.pos)

    def encode(self, tokens: Tensor) -> Tensor:
        return self.blocks(tokens)


def encode_online(encoder: Encoder, visible: EmbeddingBatch) -> Tensor:
    """Z_v for the flattened visible tokens (B, T_v, C)."""
    return encoder.encode(visible.embeddings)


def encode_momentum(encoder: Encoder, tubes: TubeBatch) -> Tensor:
    """Z over the full grid, flattened to (B, L'*N', C); never recorded on the graph."""
    with dc.no_grad():
        full = encoder.embed(tubes).embeddings
        B, Lp, Np, C = full.shape
        return dc.stop_gradient(encoder.encode(dc.reshape(full, (B, Lp * Np, C))))


class EncoderPair(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, momentum: float = 0.999,
                 members: int = 1):
        self.online = Encoder(cfg, rng, members)
        self._momentum_encoder = self.online.clone()
        self._momentum_encoder.set_requires_grad(False)
        self._m = momentum

    @property
    def momentum_encoder(self) -> Encoder:
        return self._momentum_encoder

    @property
    def m(self) -> float:
        return self._m

    def momentum_state(self) -> dict[str, np.ndarray]:
        return self._momentum_encoder.state_dict()

    def load_momentum_state(self, state):
        self._momentum_encoder.load_state_dict(state)

    def reset_momentum(self):
        self._momentum_encoder.load_state_dict(self.online.state_dict())


def ema_update(pair: EncoderPair, m: float | None = None):
    m = pair.m if m is None else m
    online = dict(pair.online.named_parameters())
    for name, p in pair.momentum_encoder.named_parameters():
        src = online[name]
        if src.shape != p.shape:
            raise ContractError(f"EMA shape mismatch at {name}")
        # blend in float64 so each update rounds once, on the store
        p.data = (m * p.data.astype(np.float64) + (1.0 - m) * src.data.astype(np.float64)).astype(p.dtype)


class Decoder(Module):
    """Shared transformer decoder run once with geometry tokens and once with latent tokens.

    Without a latent bank (``latent_token=False``) the latent pass is prompted with
    geometry tokens at every grid anchor, so the decoder relies on the geometry token alone.
    """

    def __init__(self, cfg: ModelConfig, grid: tuple[int, int], rng: np.random.Generator,
                 latent_token: bool = True):
        n_lat = grid[0] * grid[1]
        self.blocks = TransformerStack(cfg.width, cfg.decoder_depth, cfg.decoder_heads,
                                       cfg.mlp_ratio, rng)
        self.pos = PositionalMap(cfg.width, rng=rng)
        self.geo_token = trunc_normal(rng, (cfg.width,))
        if latent_token:
            self.lat_tokens = trunc_normal(rng, (n_lat, cfg.width))
        self._has_latent = latent_token
        self._grid = grid

    @property
    def has_latent_token(self) -> bool:
        return self._has_latent

    def geometry_tokens(self, masked_anchors: np.ndarray, num_frames: int) -> Tensor:
        B, Tm = masked_anchors.shape[:2]
        C = self.geo_token.shape[0]
        base = dc.expand(dc.reshape(self.geo_token, (1, 1, C)), (B, Tm, C))
        return base + self.pos(masked_anchors, num_frames)

    def latent_tokens(self, grid_anchors: np.ndarray, num_frames: int) -> Tensor:
        """One learnable vector per grid slot, with no positional term."""
        B = grid_anchors.shape[0]
        n = self._grid[0] * self._grid[1]
        if not self._has_latent:
            return self.geometry_tokens(grid_anchors.reshape(B, n, 4), num_frames)
        C = self.lat_tokens.shape[1]
        return dc.expand(dc.reshape(self.lat_tokens, (1, n, C)), (B, n, C))

    def run(self, z_v: Tensor, tokens: Tensor) -> Tensor:
        """Decode [Z_v, tokens] and return only the token positions."""
        n_vis = z_v.shape[1]
        out = self.blocks(dc.concat([z_v, tokens], axis=1))
        return out[:, n_vis:]


def decode(decoder: Decoder, z_v: Tensor, kind: str, anchors: np.ndarray | None = None,
           num_frames: int | None = None) -> Tensor:
    """Geometry pass: ``anchors`` are the masked anchors (B, T_m, 4).
    Latent pass: ``anchors`` are the full grid anchors (B, L', N', 4)."""
    if anchors is None or num_frames is None:
        raise ContractError(f"{kind} pass needs anchor positions")
    if kind == "geometry":
        return decoder.run(z_v, decoder.geometry_tokens(anchors, num_frames))
    if kind == "latent":
        return decoder.run(z_v, decoder.latent_tokens(anchors, num_frames))
    raise ContractError(f"unknown decoder pass {kind!r}")


class PointHead(Module):
    """Per-token linear map to r_t x k x 3 offsets from the tube anchor."""

    def __init__(self, width: int, r_t: int, k: int, rng: np.random.Generator):
        self.weight = trunc_normal(rng, (width, r_t * k * 3))
        self.bias = zeros(r_t * k * 3)
        self._shape = (r_t, k, 3)

    def __call__(self, z_geo: Tensor, anchors: np.ndarray) -> Tensor:
        B, Tm, _ = z_geo.shape
        r_t, k, _ = self._shape
        offsets = dc.reshape(dc.linear(z_geo, self.weight, self.bias), (B, Tm, r_t, k, 3))
        base = np.broadcast_to(anchors[:, :, None, None, :3], (B, Tm, r_t, k, 3))
        return offsets + Tensor(base, dtype=z_geo.dtype)


def predict_points(z_geo: Tensor, head: PointHead, anchors: np.ndarray) -> Tensor:
    return head(z_geo, anchors)


@dataclass
class AttentionRecord:
    layer: int
    weights: np.ndarray  # (H, T, T) for one batch item
    anchors: np.ndarray  # (T, 4) query/key token coordinates

    def rows(self):
        H, T, _ = self.weights.shape
        for h in range(H):
            for q in range(T):
                qx, qy, qz, qt = self.anchors[q]
                for k in range(T):
                    yield (self.layer, h, q, k, float(self.weights[h, q, k]), qx, qy, qz, qt)


ATTENTION_COLUMNS = ("layer", "head", "query_index", "key_index", "weight", "qx", "qy", "qz", "qt")


def export_attention(encoder: Encoder, tokens: Tensor, anchors: np.ndarray, layer: int,
                     item: int = 0) -> AttentionRecord:
    """Run the encoder with attention capture and return one layer's softmaxed weights."""
    n_layers = len(encoder.blocks.layers)
    if not 0 <= layer < n_layers:
        raise ContractError(f"layer {layer} out of range [0, {n_layers})")
    encoder.blocks.set_capture(True)
    try:
        with dc.no_grad():
            encoder.encode(tokens)
        weights = encoder.blocks.layers[layer]._attention
    finally:
        encoder.blocks.set_capture(False)
    return AttentionRecord(layer, weights[item], np.asarray(anchors)[item])


def write_attention_csv(path: str | Path, records: list[AttentionRecord]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ATTENTION_COLUMNS)
        for rec in records:
            for row in rec.rows():
                w.writerow([*row[:4], f"{row[4]:.8g}", *(f"{v:.6g}" for v in row[5:])])
