"""Spatial-aware disentangled attention and the multi-modal transformer.

Attention scores decompose into four parts per head: content-content plus
three content-position cross terms (1D sequence distance, 2D x distance,
2D y distance). Relative distances are clamped into 2k buckets; each
bucket row of a shared relative embedding table is projected per layer
into position queries/keys, and every cross term pairs a content vector
with a position vector in both directions (content-to-position with
bucket(i, j), position-to-content with bucket(j, i)).

The summed score matrix is scaled by sqrt(3 * head_dim) before the
softmax (three relative streams join the content stream, and the scale is
interpreted per head). Pre-softmax score matrices are retained for every
layer and head so the reading-order objective can supervise them.

Layers are standard post-norm blocks: attention, add & norm, GELU FFN,
add & norm. Relative tables are shared across layers; projections are
per layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vrdu.autodiff import (
    Parameter,
    Tensor,
    add,
    concat,
    dropout,
    gather_pair,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    softmax,
    transpose,
)
from vrdu.docmodel import BBox
from vrdu.embedder import MultiModalSequence
from vrdu.rng import RngStream


@dataclass(frozen=True)
class RelPosConfig:
    k_1d: int = 128
    k_2d: int = 64
    bucket_width_2d: int = 16  # normalized units per 2D bucket

    def __post_init__(self):
        if self.k_1d < 1 or self.k_2d < 1 or self.bucket_width_2d < 1:
            raise ValueError("relative-position config values must be >= 1")


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    d: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError("model dim must be divisible by head count")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def rel_bucket(pi, pj, k: int):
    """Clamped relative-distance bucket in [0, 2k-1].

    0 when pi - pj <= -k, 2k-1 when pi - pj >= k, else pi - pj + k.
    Accepts scalars or arrays.
    """
    diff = np.asarray(pi, dtype=np.int64) - np.asarray(pj, dtype=np.int64)
    out = np.where(diff <= -k, 0, np.where(diff >= k, 2 * k - 1, diff + k))
    if out.ndim == 0:
        return int(out)
    return out.astype(np.int64)


def _clamp_bucket(q, k: int):
    out = np.where(q <= -k, 0, np.where(q >= k, 2 * k - 1, q + k))
    if np.ndim(out) == 0:
        return int(out)
    return out.astype(np.int64)


def rel_bucket_2d(box_i: BBox, box_j: BBox, axis: str, cfg: RelPosConfig):
    """Bucket of the signed center distance along one 2D axis: the integer
    center difference floor-divides the bucket width, then clamps."""
    if axis == "x":
        diff = box_i.x_center - box_j.x_center
    elif axis == "y":
        diff = box_i.y_center - box_j.y_center
    else:
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    return _clamp_bucket(diff // cfg.bucket_width_2d, cfg.k_2d)


@dataclass(frozen=True)
class Buckets:
    """Precomputed pairwise bucket index matrices for one sequence."""

    d1: np.ndarray  # (n, n) 1D buckets, entry (i, j) = bucket(pos_i, pos_j)
    dx: np.ndarray
    dy: np.ndarray


def compute_buckets(seq: MultiModalSequence, cfg: RelPosConfig) -> Buckets:
    pos = seq.global_positions()
    d1 = rel_bucket(pos[:, None], pos[None, :], cfg.k_1d)
    boxes = seq.all_boxes()
    xc = np.array([b.x_center for b in boxes], dtype=np.int64)
    yc = np.array([b.y_center for b in boxes], dtype=np.int64)
    dx = _clamp_bucket((xc[:, None] - xc[None, :]) // cfg.bucket_width_2d, cfg.k_2d)
    dy = _clamp_bucket((yc[:, None] - yc[None, :]) // cfg.bucket_width_2d, cfg.k_2d)
    return Buckets(d1=d1, dx=dx, dy=dy)


class LayerParams:
    """Per-layer projections and feed-forward weights."""

    def __init__(self, cfg: TransformerConfig, stream: RngStream, prefix: str, std: float = 0.02):
        d, f = cfg.d, cfg.ffn_dim

        def w(name, rows, cols):
            return Parameter(stream.normal((rows, cols), std=std), f"{prefix}.{name}")

        def b(name, size):
            return Parameter(np.zeros(size), f"{prefix}.{name}")

        self.q_w, self.q_b = w("q_w", d, d), b("q_b", d)
        self.k_w, self.k_b = w("k_w", d, d), b("k_b", d)
        self.v_w, self.v_b = w("v_w", d, d), b("v_b", d)
        self.pos_q_1p = w("pos_q_1p", d, d)
        self.pos_k_1p = w("pos_k_1p", d, d)
        self.pos_q_2x = w("pos_q_2x", d, d)
        self.pos_k_2x = w("pos_k_2x", d, d)
        self.pos_q_2y = w("pos_q_2y", d, d)
        self.pos_k_2y = w("pos_k_2y", d, d)
        self.out_w, self.out_b = w("out_w", d, d), b("out_b", d)
        self.ln1_g = Parameter(np.ones(d), f"{prefix}.ln1_g")
        self.ln1_b = b("ln1_b", d)
        self.ffn_w1, self.ffn_b1 = w("ffn_w1", d, f), b("ffn_b1", f)
        self.ffn_w2, self.ffn_b2 = w("ffn_w2", f, d), b("ffn_b2", d)
        self.ln2_g = Parameter(np.ones(d), f"{prefix}.ln2_g")
        self.ln2_b = b("ln2_b", d)

    def parameters(self) -> list[Parameter]:
        return [v for v in vars(self).values() if isinstance(v, Parameter)]


class DisentangledTransformer:
    def __init__(self, cfg: TransformerConfig, rel_cfg: RelPosConfig, stream: RngStream,
                 std: float = 0.02):
        self.cfg = cfg
        self.rel_cfg = rel_cfg
        self.rel_1p = Parameter(stream.normal((2 * rel_cfg.k_1d, cfg.d), std=std), "rel.1p")
        self.rel_2x = Parameter(stream.normal((2 * rel_cfg.k_2d, cfg.d), std=std), "rel.2x")
        self.rel_2y = Parameter(stream.normal((2 * rel_cfg.k_2d, cfg.d), std=std), "rel.2y")
        self.layers = [
            LayerParams(cfg, stream, f"layer{i}") for i in range(cfg.layers)
        ]

    def parameters(self) -> list[Parameter]:
        out = [self.rel_1p, self.rel_2x, self.rel_2y]
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def head_slice(self, t: Tensor, h: int) -> Tensor:
        dh = self.cfg.head_dim
        return t[:, h * dh : (h + 1) * dh]

    def disentangled_scores(self, layer: LayerParams, h_in: Tensor,
                            buckets: Buckets) -> list[tuple[Tensor, Tensor, Tensor, Tensor]]:
        """Per-head (content-content, 1D, 2x, 2y) score components."""
        n = h_in.shape[0]
        q_ct = linear(h_in, layer.q_w, layer.q_b)
        k_ct = linear(h_in, layer.k_w, layer.k_b)
        proj = {
            "1p": (matmul(self.rel_1p, layer.pos_q_1p), matmul(self.rel_1p, layer.pos_k_1p), buckets.d1),
            "2x": (matmul(self.rel_2x, layer.pos_q_2x), matmul(self.rel_2x, layer.pos_k_2x), buckets.dx),
            "2y": (matmul(self.rel_2y, layer.pos_q_2y), matmul(self.rel_2y, layer.pos_k_2y), buckets.dy),
        }
        i_grid = np.broadcast_to(np.arange(n)[:, None], (n, n))
        j_grid = i_grid.T

        out = []
        for h in range(self.cfg.heads):
            qh = self.head_slice(q_ct, h)
            kh = self.head_slice(k_ct, h)
            a_cc = matmul(qh, transpose(kh))
            comps = []
            for name in ("1p", "2x", "2y"):
                pos_q, pos_k, idx = proj[name]
                # content-to-position: Q^ct_i . K^pos_{bucket(i, j)}
                c2p_tbl = matmul(qh, transpose(self.head_slice(pos_k, h)))
                c2p = gather_pair(c2p_tbl, i_grid, idx)
                # position-to-content: K^ct_j . Q^pos_{bucket(j, i)}
                p2c_tbl = matmul(kh, transpose(self.head_slice(pos_q, h)))
                p2c = gather_pair(p2c_tbl, j_grid, idx.T)
                comps.append(add(c2p, p2c))
            out.append((a_cc, comps[0], comps[1], comps[2]))
        return out

    def attention(self, layer: LayerParams, h_in: Tensor, buckets: Buckets,
                  mask: np.ndarray) -> tuple[Tensor, list[Tensor]]:
        """One attention sublayer; returns (output, per-head pre-softmax scores)."""
        dh = self.cfg.head_dim
        scale = 1.0 / np.sqrt(3.0 * dh)
        bias = np.where(mask, 0.0, -np.inf)[None, :]
        v_ct = linear(h_in, layer.v_w, layer.v_b)

        head_outs = []
        a_hats = []
        for h, (a_cc, a_1p, a_2x, a_2y) in enumerate(
            self.disentangled_scores(layer, h_in, buckets)
        ):
            a_hat = add(add(a_cc, a_1p), add(a_2x, a_2y))
            a_hats.append(a_hat)
            weights = softmax(add(mul(a_hat, scale), Tensor(bias)), axis=-1)
            head_outs.append(matmul(weights, self.head_slice(v_ct, h)))
        merged = concat(head_outs, axis=1)
        return linear(merged, layer.out_w, layer.out_b), a_hats

    def forward(self, h0: Tensor, buckets: Buckets, mask: np.ndarray,
                train: bool = False, drop_stream: RngStream | None = None
                ) -> tuple[list[Tensor], list[list[Tensor]]]:
        """Run all layers; returns (hidden states per layer incl. input,
        pre-softmax score matrices per layer per head)."""
        rate = self.cfg.dropout if train else 0.0
        hiddens = [h0]
        attn_stack: list[list[Tensor]] = []
        x = h0
        for layer in self.layers:
            attn_out, a_hats = self.attention(layer, x, buckets, mask)
            attn_stack.append(a_hats)
            if rate > 0:
                attn_out = dropout(attn_out, rate, drop_stream)
            x = layer_norm(add(x, attn_out), layer.ln1_g, layer.ln1_b)
            ffn = linear(gelu(linear(x, layer.ffn_w1, layer.ffn_b1)),
                         layer.ffn_w2, layer.ffn_b2)
            if rate > 0:
                ffn = dropout(ffn, rate, drop_stream)
            x = layer_norm(add(x, ffn), layer.ln2_g, layer.ln2_b)
            hiddens.append(x)
        return hiddens, attn_stack
