"""Frozen encoder stand-ins: embedding providers and a seeded text composer.

The composer consumes token sequences that may contain continuous
pseudo-token rows injected at slot positions. Its weights are generated
once from a seed and never updated, so gradients flow only into the
injected pseudo block. Output features are mean-pooled and L2-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import FeatureLookupError, InjectionError, LengthError, MiningError
from .layers import feed_forward, linear_init, multi_head_attention
from .numeric import Tensor
from .seeding import rng_for
from .store import EmbeddingMatrix, KnowledgeRecord

# fixed prompt vocabulary; ids below 8 are reserved for template words
TOKEN_A = 1
TOKEN_PHOTO = 2
TOKEN_OF = 3


@dataclass(frozen=True)
class Tok:
    token_id: int


@dataclass(frozen=True)
class Slot:
    index: int


TokenItem = Tok | Slot


@dataclass
class TokenSequence:
    """Ordered mix of discrete tokens and pseudo-token slots."""

    items: list[TokenItem]

    def __len__(self) -> int:
        return len(self.items)

    def slot_count(self) -> int:
        return sum(1 for it in self.items if isinstance(it, Slot))

    def slot_positions(self) -> list[tuple[int, int]]:
        """(position, slot index) pairs in sequence order."""
        return [(pos, it.index) for pos, it in enumerate(self.items) if isinstance(it, Slot)]

    def drop_slots(self) -> "TokenSequence":
        return TokenSequence([it for it in self.items if isinstance(it, Tok)])

    def to_json_items(self) -> list[dict]:
        return [{"tok": it.token_id} if isinstance(it, Tok) else {"slot": it.index} for it in self.items]

    @staticmethod
    def from_json_items(items: list[dict]) -> "TokenSequence":
        out: list[TokenItem] = []
        for obj in items:
            if "tok" in obj:
                out.append(Tok(int(obj["tok"])))
            elif "slot" in obj:
                out.append(Slot(int(obj["slot"])))
            else:
                raise MiningError(f"unknown token item {obj}")
        return TokenSequence(out)


def make_prompt(pseudo_rows: int) -> TokenSequence:
    """'a photo of' followed by the pseudo-token slots."""
    if pseudo_rows < 1:
        raise InjectionError("prompt needs at least one pseudo slot")
    items: list[TokenItem] = [Tok(TOKEN_A), Tok(TOKEN_PHOTO), Tok(TOKEN_OF)]
    items += [Slot(i) for i in range(pseudo_rows)]
    return TokenSequence(items)


def inject_span(record: KnowledgeRecord, pseudo_rows: int) -> TokenSequence:
    """Replace the record's subject span with pseudo slots, keeping the rest."""
    if record.subject_span is None:
        raise MiningError(f"record {record.id} has no subject span")
    start, end = record.subject_span
    items: list[TokenItem] = [Tok(t) for t in record.caption_tokens[:start]]
    items += [Slot(i) for i in range(pseudo_rows)]
    items += [Tok(t) for t in record.caption_tokens[end:]]
    return TokenSequence(items)


@dataclass
class EmbeddingProvider:
    """Row lookup over a feature bank; ids are row indices."""

    matrix: EmbeddingMatrix

    @property
    def dim(self) -> int:
        return self.matrix.dim

    def lookup(self, idx: int) -> np.ndarray:
        if not 0 <= idx < self.matrix.count:
            raise FeatureLookupError(f"feature id {idx} outside [0, {self.matrix.count})")
        return self.matrix.values[idx]

    def lookup_many(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.matrix.count):
            raise FeatureLookupError(f"feature ids outside [0, {self.matrix.count})")
        return self.matrix.values[ids]


@dataclass
class FrozenComposer:
    """Seeded transformer over token sequences; weights never update."""

    dim: int
    vocab_size: int
    max_len: int
    heads: int
    vocab: np.ndarray
    positional: np.ndarray
    blocks: list[dict[str, Tensor]]
    final_gain: Tensor
    final_bias: Tensor

    def weight_bytes(self) -> bytes:
        """Serialized weights, for freeze checks."""
        chunks = [self.vocab.tobytes(), self.positional.tobytes()]
        for blk in self.blocks:
            for name in sorted(blk):
                chunks.append(blk[name].data.tobytes())
        chunks += [self.final_gain.data.tobytes(), self.final_bias.data.tobytes()]
        return b"".join(chunks)


def build_composer(
    seed: int,
    dim: int = 64,
    vocab_size: int = 1024,
    max_len: int = 32,
    blocks: int = 2,
    heads: int = 4,
    dtype=np.float32,
    block_gain: float = 0.5,
) -> FrozenComposer:
    rng = rng_for(seed, "composer")
    scale = 1.0 / np.sqrt(dim)
    vocab = (rng.standard_normal((vocab_size, dim)) * scale).astype(dtype)
    positional = (rng.standard_normal((max_len, dim)) * 0.3 * scale).astype(dtype)

    def block() -> dict[str, Tensor]:
        hidden = 4 * dim
        return {
            "ln1_g": nm.constant(np.ones(dim), dtype),
            "ln1_b": nm.constant(np.zeros(dim), dtype),
            "wq": nm.constant(linear_init(rng, dim, dim, dtype), dtype),
            "bq": nm.constant(np.zeros(dim), dtype),
            "wk": nm.constant(linear_init(rng, dim, dim, dtype), dtype),
            "bk": nm.constant(np.zeros(dim), dtype),
            "wv": nm.constant(linear_init(rng, dim, dim, dtype), dtype),
            "bv": nm.constant(np.zeros(dim), dtype),
            "wo": nm.constant(block_gain * linear_init(rng, dim, dim, dtype), dtype),
            "bo": nm.constant(np.zeros(dim), dtype),
            "ln2_g": nm.constant(np.ones(dim), dtype),
            "ln2_b": nm.constant(np.zeros(dim), dtype),
            "ff1_w": nm.constant(linear_init(rng, dim, hidden, dtype), dtype),
            "ff1_b": nm.constant(np.zeros(hidden), dtype),
            "ff2_w": nm.constant(block_gain * linear_init(rng, hidden, dim, dtype), dtype),
            "ff2_b": nm.constant(np.zeros(dim), dtype),
        }

    return FrozenComposer(
        dim=dim,
        vocab_size=vocab_size,
        max_len=max_len,
        heads=heads,
        vocab=vocab,
        positional=positional,
        blocks=[block() for _ in range(blocks)],
        final_gain=nm.constant(np.ones(dim), dtype),
        final_bias=nm.constant(np.zeros(dim), dtype),
    )


def _validate_sequence(composer: FrozenComposer, seq: TokenSequence, pseudo_rows: int) -> None:
    if len(seq) == 0:
        raise LengthError("cannot compose an empty token sequence")
    if len(seq) > composer.max_len:
        raise LengthError(f"sequence length {len(seq)} exceeds max {composer.max_len}")
    for item in seq.items:
        if isinstance(item, Slot) and item.index >= pseudo_rows:
            raise InjectionError(f"slot index {item.index} >= pseudo rows {pseudo_rows}")
        if isinstance(item, Tok) and not 0 <= item.token_id < composer.vocab_size:
            raise InjectionError(f"token id {item.token_id} outside vocab {composer.vocab_size}")


def compose_batch(composer: FrozenComposer, seqs: list[TokenSequence], pseudo: Tensor | None) -> Tensor:
    """Encode same-length sequences with per-item pseudo blocks; returns (B, d).

    Differentiable with respect to ``pseudo`` only. Sequences in one batch
    must share length and slot layout size.
    """
    nbatch = len(seqs)
    if nbatch == 0:
        raise LengthError("empty batch")
    length = len(seqs[0])
    pseudo_rows = 0
    if pseudo is not None:
        if pseudo.data.ndim != 3 or pseudo.shape[0] != nbatch or pseudo.shape[2] != composer.dim:
            raise InjectionError(f"pseudo block shape {pseudo.shape} != ({nbatch}, p, {composer.dim})")
        pseudo_rows = pseudo.shape[1]
    slot_counts = {seq.slot_count() for seq in seqs}
    if len({len(s) for s in seqs}) != 1 or len(slot_counts) != 1:
        raise LengthError("batch sequences must share length and slot count")
    n_slots = slot_counts.pop()
    if n_slots > 0 and pseudo is None:
        raise InjectionError("sequence has slots but no pseudo block was given")

    base = np.zeros((nbatch, length, composer.dim), dtype=composer.vocab.dtype)
    positions = np.zeros((nbatch, n_slots), dtype=np.int64)
    sources = np.zeros((nbatch, n_slots), dtype=np.int64)
    for bi, seq in enumerate(seqs):
        _validate_sequence(composer, seq, pseudo_rows)
        si = 0
        for pos, item in enumerate(seq.items):
            if isinstance(item, Tok):
                base[bi, pos] = composer.vocab[item.token_id]
            else:
                positions[bi, si] = pos
                sources[bi, si] = item.index
                si += 1
    base += composer.positional[:length]

    if n_slots:
        x = nm.add(nm.inject_rows(np.zeros_like(base), pseudo, positions, sources),
                   nm.constant(base, base.dtype))
    else:
        x = nm.constant(base, base.dtype)

    for blk in composer.blocks:
        normed = nm.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
        attn = multi_head_attention(
            normed, normed, normed,
            blk["wq"], blk["bq"], blk["wk"], blk["bk"], blk["wv"], blk["bv"],
            blk["wo"], blk["bo"], composer.heads,
        )
        x = nm.add(x, attn)
        x = nm.add(x, feed_forward(nm.layer_norm(x, blk["ln2_g"], blk["ln2_b"]),
                                   blk["ff1_w"], blk["ff1_b"], blk["ff2_w"], blk["ff2_b"]))

    x = nm.layer_norm(x, composer.final_gain, composer.final_bias)
    pooled = nm.mean_axis(x, 1)
    return nm.l2_normalize(pooled)


def compose(composer: FrozenComposer, seq: TokenSequence, pseudo: Tensor | None = None) -> Tensor:
    """Single-sequence composition; returns a (d,) feature."""
    block = None
    if pseudo is not None:
        if pseudo.data.ndim != 2:
            raise InjectionError(f"pseudo block must be (p, d), got {pseudo.shape}")
        block = nm.reshape(pseudo, (1,) + pseudo.shape)
    out = compose_batch(composer, [seq], block)
    return nm.reshape(out, (out.shape[1],))
