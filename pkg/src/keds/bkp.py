"""Knowledge-guided projection: reference feature + retrieved context -> pseudo token.

A projection network maps a d-dim reference feature through a shared linear
block, then runs two independent cross-attention stacks against retrieved
image features and caption features. The output is a 3 x d pseudo-token
block: [mapped reference, image-context token, caption-context token].
Retrieved rows carry no positional encoding, so the projection is invariant
to their order.

Two instances are trained side by side (contrastive stream and alignment
stream); they share the architecture but never the parameter storage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import ConfigError, DimensionError, EmptyContextError
from .layers import feed_forward, linear_init, multi_head_attention
from .numeric import Tensor
from .seeding import rng_for


@dataclass
class KnowledgeContext:
    """Top-K retrieved image and caption features for one reference."""

    image_feats: np.ndarray
    caption_feats: np.ndarray
    image_ids: list[int] | None = None
    caption_ids: list[int] | None = None

    def __post_init__(self):
        self.image_feats = np.asarray(self.image_feats, dtype=np.float32)
        self.caption_feats = np.asarray(self.caption_feats, dtype=np.float32)
        if self.image_feats.shape != self.caption_feats.shape:
            raise DimensionError(
                f"context banks disagree: {self.image_feats.shape} vs {self.caption_feats.shape}"
            )


@dataclass
class PseudoToken:
    """3 x d continuous token block; row 0 is the mapped reference feature."""

    rows: Tensor

    def numpy(self) -> np.ndarray:
        return self.rows.data


_LAYER_KEYS = (
    "ln1_g", "ln1_b",
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b",
    "ff1_w", "ff1_b", "ff2_w", "ff2_b",
)


@dataclass
class BkpParams:
    """Shared linear block plus two independent cross-attention stacks."""

    dim: int
    heads: int
    psi_w: Tensor
    psi_b: Tensor
    img_stack: list[dict[str, Tensor]]
    cap_stack: list[dict[str, Tensor]]

    @property
    def n_layers(self) -> int:
        return len(self.img_stack)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [("psi.w", self.psi_w), ("psi.b", self.psi_b)]
        for side, stack in (("img", self.img_stack), ("cap", self.cap_stack)):
            for li, layer in enumerate(stack):
                for key in _LAYER_KEYS:
                    out.append((f"{side}.{li}.{key}", layer[key]))
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]


def init(seed: int, dim: int = 64, n_layers: int = 3, heads: int = 4, dtype=np.float32) -> BkpParams:
    """Seeded initialization: scaled-uniform weights, psi near identity."""
    if dim % heads:
        raise ConfigError(f"dim {dim} not divisible by heads {heads}")
    if n_layers < 1:
        raise ConfigError("need at least one cross-attention layer")
    rng = rng_for(seed, "bkp-init")
    psi_w = np.eye(dim) + (0.05 / np.sqrt(dim)) * rng.standard_normal((dim, dim))

    def layer() -> dict[str, Tensor]:
        hidden = 4 * dim
        return {
            "ln1_g": nm.parameter(np.ones(dim), dtype),
            "ln1_b": nm.parameter(np.zeros(dim), dtype),
            "wq": nm.parameter(linear_init(rng, dim, dim, dtype), dtype),
            "bq": nm.parameter(np.zeros(dim), dtype),
            "wk": nm.parameter(linear_init(rng, dim, dim, dtype), dtype),
            "bk": nm.parameter(np.zeros(dim), dtype),
            "wv": nm.parameter(linear_init(rng, dim, dim, dtype), dtype),
            "bv": nm.parameter(np.zeros(dim), dtype),
            "wo": nm.parameter(linear_init(rng, dim, dim, dtype), dtype),
            "bo": nm.parameter(np.zeros(dim), dtype),
            "ln2_g": nm.parameter(np.ones(dim), dtype),
            "ln2_b": nm.parameter(np.zeros(dim), dtype),
            "ff1_w": nm.parameter(linear_init(rng, dim, hidden, dtype), dtype),
            "ff1_b": nm.parameter(np.zeros(hidden), dtype),
            "ff2_w": nm.parameter(linear_init(rng, hidden, dim, dtype), dtype),
            "ff2_b": nm.parameter(np.zeros(dim), dtype),
        }

    return BkpParams(
        dim=dim,
        heads=heads,
        psi_w=nm.parameter(psi_w, dtype),
        psi_b=nm.parameter(np.zeros(dim), dtype),
        img_stack=[layer() for _ in range(n_layers)],
        cap_stack=[layer() for _ in range(n_layers)],
    )


def _stack_forward(stack: list[dict[str, Tensor]], query: Tensor, ctx: Tensor, heads: int) -> Tensor:
    x = query
    for blk in stack:
        normed = nm.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
        attn = multi_head_attention(
            normed, ctx, ctx,
            blk["wq"], blk["bq"], blk["wk"], blk["bk"], blk["wv"], blk["bv"],
            blk["wo"], blk["bo"], heads,
        )
        x = nm.add(x, attn)
        x = nm.add(x, feed_forward(nm.layer_norm(x, blk["ln2_g"], blk["ln2_b"]),
                                   blk["ff1_w"], blk["ff1_b"], blk["ff2_w"], blk["ff2_b"]))
    return x


def project_batch(params: BkpParams, refs: Tensor, image_ctx: Tensor, caption_ctx: Tensor) -> Tensor:
    """Batched projection: (B, d) refs + (B, K, d) contexts -> (B, 3, d) blocks."""
    if refs.data.ndim != 2 or refs.shape[1] != params.dim:
        raise DimensionError(f"reference block {refs.shape} vs dim {params.dim}")
    for ctx in (image_ctx, caption_ctx):
        if ctx.data.ndim != 3 or ctx.shape[0] != refs.shape[0] or ctx.shape[2] != params.dim:
            raise DimensionError(f"context block {ctx.shape} vs refs {refs.shape}")
    if image_ctx.shape[1] == 0 or caption_ctx.shape[1] == 0:
        raise EmptyContextError("projection needs at least one retrieved row per modality")

    nbatch = refs.shape[0]
    mapped_ref = nm.add(nm.matmul(refs, params.psi_w), params.psi_b)
    mapped_img = nm.add(nm.matmul(image_ctx, params.psi_w), params.psi_b)
    mapped_cap = nm.add(nm.matmul(caption_ctx, params.psi_w), params.psi_b)

    query = nm.reshape(mapped_ref, (nbatch, 1, params.dim))
    tok_img = _stack_forward(params.img_stack, query, mapped_img, params.heads)
    tok_cap = _stack_forward(params.cap_stack, query, mapped_cap, params.heads)
    return nm.concat([query, tok_img, tok_cap], axis=1)


def project(params: BkpParams, ref: Tensor | np.ndarray, ctx: KnowledgeContext) -> PseudoToken:
    """Single-reference projection returning the 3 x d pseudo token."""
    if ctx.image_feats.shape[0] < 1:
        raise EmptyContextError("empty knowledge context")
    if not isinstance(ref, Tensor):
        ref = nm.constant(ref, params.psi_w.dtype)
    if ref.data.ndim != 1:
        raise DimensionError(f"reference must be a d-vector, got {ref.shape}")
    if ref.shape[0] != params.dim or ctx.image_feats.shape[1] != params.dim:
        raise DimensionError(
            f"dim mismatch: ref {ref.shape[0]}, ctx {ctx.image_feats.shape[1]}, params {params.dim}"
        )
    refs = nm.reshape(ref, (1, params.dim))
    img = nm.constant(ctx.image_feats[None, :, :], params.psi_w.dtype)
    cap = nm.constant(ctx.caption_feats[None, :, :], params.psi_w.dtype)
    block = project_batch(params, refs, img, cap)
    return PseudoToken(rows=nm.reshape(block, (3, params.dim)))
