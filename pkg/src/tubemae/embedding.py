"""Point 4D convolution: one embedding vector per tube."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractError, DimensionError
from .geometry import TubeBatch
from .params import Module, xavier, zeros

AGGREGATIONS = ("literal-sum", "mlp-max")


@dataclass
class EmbeddingBatch:
    embeddings: Tensor  # (..., L', N', C)
    anchors: np.ndarray  # (..., L', N', 4)
    num_frames: int

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.embeddings.shape[-3], self.embeddings.shape[-2]


class P4DKernel(Module):
    """Learnable tube-to-vector transform.

    ``W_d`` is stored as (C, 4) and ``W_f`` as (C, C_in), i.e. output-major.
    """

    def __init__(self, width: int, in_features: int = 0, aggregation: str = "literal-sum",
                 bias: bool = True, rng: np.random.Generator | None = None, members: int = 1):
        if aggregation not in AGGREGATIONS:
            raise ContractError(f"unknown aggregation {aggregation!r}")
        rng = rng or np.random.default_rng(0)
        # a literal sum over ``members`` inputs has that many times the fan-in
        fan = members if aggregation == "literal-sum" else 1
        self.W_d = xavier(rng, 4 * fan, width, shape=(width, 4))
        self.W_f = (xavier(rng, in_features * fan, width, shape=(width, in_features))
                    if in_features else None)
        self.bias = zeros(width) if bias else None
        self._aggregation = aggregation
        self._in_features = in_features

    @property
    def aggregation(self) -> str:
        return self._aggregation

    @property
    def width(self) -> int:
        return self.W_d.shape[0]


def normalized_displacements(tubes: TubeBatch) -> np.ndarray:
    """Spatial offsets divided by r_s, frame offsets by the half window."""
    cfg = tubes.cfg
    d = tubes.displacements.copy()
    d[..., :3] /= cfg.r_s
    d[..., 3] /= max(cfg.half_window, 1)
    return d


def p4d_embed(tubes: TubeBatch, kernel: P4DKernel) -> EmbeddingBatch:
    disp = Tensor(normalized_displacements(tubes))  # (..., L', N', r_t, k, 4)
    feats = tubes.member_features
    if (feats is None) != (kernel.W_f is None):
        raise DimensionError("feature channels present on only one of tubes / kernel")
    if feats is not None and feats.shape[-1] != kernel.W_f.shape[1]:
        raise DimensionError(f"features have {feats.shape[-1]} channels, kernel expects {kernel.W_f.shape[1]}")
    wd = dc.transpose(kernel.W_d, (1, 0))
    lead = disp.shape[:-3]
    n_members = disp.shape[-3] * disp.shape[-2]

    if kernel.aggregation == "literal-sum":
        # the sum is linear, so aggregate the inputs before transforming them
        out = dc.linear(dc.sum(dc.reshape(disp, lead + (n_members, 4)), axis=-2), wd)
        if feats is not None:
            f = Tensor(feats.reshape(lead + (n_members, feats.shape[-1])))
            out = out + dc.linear(dc.sum(f, axis=-2), dc.transpose(kernel.W_f, (1, 0)))
        if kernel.bias is not None:
            out = out + dc.expand(dc.reshape(kernel.bias, (1,) * len(lead) + (kernel.width,)),
                                  lead + (kernel.width,))
    else:
        flat = dc.reshape(disp, lead + (n_members, 4))
        h = dc.linear(flat, wd, kernel.bias)
        if feats is not None:
            f = Tensor(feats.reshape(lead + (n_members, feats.shape[-1])))
            h = h + dc.linear(f, dc.transpose(kernel.W_f, (1, 0)))
        out = dc.max(dc.relu(h), axis=-2)
    return EmbeddingBatch(out, tubes.anchors, tubes.num_frames)


def p4d_reference(displacements: np.ndarray, W_d: np.ndarray, bias: np.ndarray | None = None,
                  features: np.ndarray | None = None, W_f: np.ndarray | None = None) -> np.ndarray:
    """Scalar-loop literal-sum evaluation for a single tube's members (r_t, k, 4)."""
    c = W_d.shape[0]
    out = np.zeros(c)
    members = displacements.reshape(-1, 4)
    fmem = None if features is None else features.reshape(len(members), -1)
    for m, delta in enumerate(members):
        for o in range(c):
            acc = 0.0
            for j in range(4):
                acc += W_d[o, j] * delta[j]
            if fmem is not None:
                for j in range(fmem.shape[1]):
                    acc += W_f[o, j] * fmem[m, j]
            out[o] += acc
    if bias is not None:
        out += bias
    return out


class PositionalMap(Module):
    """Linear map from normalized anchor (x, y, z, t) to the embedding width."""

    def __init__(self, width: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.weight = xavier(rng, 4, width)
        self.bias = zeros(width)

    def __call__(self, anchors: np.ndarray, num_frames: int) -> Tensor:
        return dc.linear(Tensor(normalize_anchors(anchors, num_frames)), self.weight, self.bias)


def normalize_anchors(anchors: np.ndarray, num_frames: int) -> np.ndarray:
    a = np.array(anchors, dtype=np.float64)
    a[..., 3] = 2.0 * a[..., 3] / max(num_frames - 1, 1) - 1.0
    return a


def positional_encode(batch: EmbeddingBatch, posmap: PositionalMap) -> EmbeddingBatch:
    return EmbeddingBatch(batch.embeddings + posmap(batch.anchors, batch.num_frames),
                          batch.anchors, batch.num_frames)

