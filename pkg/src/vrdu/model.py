"""Full model assembly: embedding tables, transformer, pre-training heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vrdu.attention import Buckets, DisentangledTransformer, RelPosConfig, TransformerConfig, compute_buckets
from vrdu.autodiff import Parameter, Tensor
from vrdu.embedder import EmbeddingTables, ModelDims, MultiModalSequence, PatchEncoder, embed_sequence
from vrdu.rng import RngStream


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale defaults; a production-scale encoder would use 24 layers,
    d=1024, 16 heads, but that is far outside a laptop budget."""

    layers: int = 2
    d: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.0
    vocab_size: int = 200
    max_text_len: int = 512
    grid: int = 7
    patch_dim: int = 8
    image_channels: int = 1
    k_1d: int = 128
    k_2d: int = 64
    bucket_width_2d: int = 16

    def dims(self) -> ModelDims:
        return ModelDims(d=self.d, max_text_len=self.max_text_len, grid=self.grid,
                         patch_dim=self.patch_dim, image_channels=self.image_channels)

    def transformer(self) -> TransformerConfig:
        return TransformerConfig(layers=self.layers, d=self.d, heads=self.heads,
                                 ffn_dim=self.ffn_dim, dropout=self.dropout)

    def rel_pos(self) -> RelPosConfig:
        return RelPosConfig(k_1d=self.k_1d, k_2d=self.k_2d,
                            bucket_width_2d=self.bucket_width_2d)

    @property
    def hw(self) -> int:
        return self.grid * self.grid


@dataclass
class ForwardResult:
    h0: Tensor
    hiddens: list[Tensor]  # per layer, excluding the input
    attn_stack: list[list[Tensor]]  # [layer][head] pre-softmax scores

    @property
    def final(self) -> Tensor:
        return self.hiddens[-1]


class DocModel:
    """Encoder plus the pre-training prediction heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        stream = RngStream(seed, "init")
        dims = cfg.dims()
        self.tables = EmbeddingTables(dims, cfg.vocab_size, stream)
        self.encoder = DisentangledTransformer(cfg.transformer(), cfg.rel_pos(), stream)
        self.patch_encoder = PatchEncoder(dims, seed)
        self.rrp_w = Parameter(stream.normal((cfg.d, cfg.hw), std=0.02), "head.rrp_w")
        self.rrp_b = Parameter(np.zeros(cfg.hw), "head.rrp_b")
        self.tia_w = Parameter(stream.normal((cfg.d, 1), std=0.02), "head.tia_w")
        self.tia_b = Parameter(np.zeros(1), "head.tia_b")

    def parameters(self) -> list[Parameter]:
        return (
            self.tables.parameters()
            + self.encoder.parameters()
            + [self.rrp_w, self.rrp_b, self.tia_w, self.tia_b]
        )

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def buckets(self, seq: MultiModalSequence) -> Buckets:
        return compute_buckets(seq, self.cfg.rel_pos())

    def forward(self, seq: MultiModalSequence, train: bool = False,
                drop_stream: RngStream | None = None,
                buckets: Buckets | None = None) -> ForwardResult:
        h0 = embed_sequence(self.tables, seq)
        if buckets is None:
            buckets = self.buckets(seq)
        hiddens, attn_stack = self.encoder.forward(
            h0, buckets, seq.attention_mask, train=train, drop_stream=drop_stream
        )
        return ForwardResult(h0=h0, hiddens=hiddens[1:], attn_stack=attn_stack)
