"""Dual-stream optimization of the two projection networks.

Stream M pushes composed prompt features toward the reference image
features with a symmetric contrastive loss; stream A registers composed
caption templates against caption features with a cosine loss plus a
weighted complement term. Both streams share batches and a single AdamW
step by default (an alternating mode trains them on alternating steps).
The frozen composer sits between the projections and both losses, so
gradients reach only projection parameters.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nm
from .bkp import BkpParams, project_batch
from .encoders import FrozenComposer, TokenSequence, compose_batch, make_prompt
from .errors import BatchError, ConfigError, DegenerateVectorError, FormatError, ScheduleError
from .mining import PseudoTriplet
from .numeric import Tensor
from .seeding import rng_for
from .store import EmbeddingMatrix, FlatIndex, decode_matrix, encode_matrix

log = logging.getLogger("keds.trainer")

CKPT_MAGIC = b"KEDC"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    """Hyperparameters; the constructor defaults are the full-scale settings."""

    lr: float = 5e-5
    weight_decay: float = 0.1
    warmup_steps: int = 10_000
    epochs: int = 30
    batch_size: int = 512
    steps: int = 0  # 0 derives the count from epochs * ceil(n / batch)
    tau: float = 100.0
    beta: float = 1.0
    k: int = 16
    seed: int = 0
    dim: int = 64
    layers: int = 3
    heads: int = 4
    alternate_streams: bool = False
    prompt_only_templates: bool = False  # stream A context knockout
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")

    def total_steps(self, n_items: int) -> int:
        if self.steps > 0:
            return self.steps
        return self.epochs * int(np.ceil(n_items / self.batch_size))

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).digest()


def desk_config(**overrides) -> TrainConfig:
    """Desk-scale defaults: small batches, short schedule, 64-dim features."""
    base = dict(
        lr=2e-3, weight_decay=0.1, warmup_steps=200, batch_size=64, steps=2000,
        tau=100.0, beta=1.0, k=16, dim=64, layers=3, heads=4,
    )
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _diag_mean(matrix: Tensor) -> Tensor:
    n = matrix.shape[0]
    eye = nm.constant(np.eye(n), matrix.data.dtype)
    return nm.scale(nm.sum_all(nm.mul(matrix, eye)), 1.0 / n)


def contrastive_loss(img: Tensor, txt: Tensor, tau: float) -> Tensor:
    """Symmetric cross-entropy over scaled pairwise similarities.

    Rows are normalized internally; matched pairs sit on the diagonal.
    """
    if img.data.ndim != 2 or txt.data.ndim != 2 or img.shape != txt.shape:
        raise BatchError(f"contrastive loss needs matching (B, d) blocks, got {img.shape} and {txt.shape}")
    if img.shape[0] < 2:
        raise BatchError(f"contrastive loss needs a batch of >= 2, got {img.shape[0]}")
    img_n = nm.l2_normalize(img)
    txt_n = nm.l2_normalize(txt)
    sims = nm.scale(nm.matmul(img_n, nm.transpose(txt_n)), tau)
    loss_i2t = nm.scale(_diag_mean(nm.log_softmax_rows(sims)), -1.0)
    loss_t2i = nm.scale(_diag_mean(nm.log_softmax_rows(nm.transpose(sims))), -1.0)
    return nm.add(loss_i2t, loss_t2i)


def _row_cosine(a: Tensor, b: Tensor) -> Tensor:
    return nm.sum_axis(nm.mul(nm.l2_normalize(a), nm.l2_normalize(b)), -1)


def registration_loss(
    composed: Tensor,
    target: Tensor,
    complement_a: Tensor,
    complement_b: Tensor,
    beta: float,
) -> Tensor:
    """Cosine alignment term plus beta-weighted averaged complement term."""
    for v in (composed, target, complement_a, complement_b):
        if v.data.ndim != 1:
            raise DegenerateVectorError(f"registration loss takes d-vectors, got {v.shape}")
    cos_main = nm.dot(nm.l2_normalize(composed), nm.l2_normalize(target))
    loss_cos = nm.affine(cos_main, -1.0, 1.0)
    cos_pair = nm.add(
        nm.dot(nm.l2_normalize(composed), nm.l2_normalize(complement_a)),
        nm.dot(nm.l2_normalize(composed), nm.l2_normalize(complement_b)),
    )
    loss_sup = nm.affine(cos_pair, -0.5, 1.0)
    if beta == 0.0:
        return loss_cos
    return nm.add(loss_cos, nm.scale(loss_sup, beta))


def registration_loss_batch(
    composed: Tensor,
    target: Tensor,
    complement_a: Tensor,
    complement_b: Tensor,
    beta: float,
) -> Tensor:
    """Mean registration loss over (B, d) blocks; same formula per row."""
    loss_cos = nm.mean_all(nm.affine(_row_cosine(composed, target), -1.0, 1.0))
    pair = nm.add(_row_cosine(composed, complement_a), _row_cosine(composed, complement_b))
    loss_sup = nm.mean_all(nm.affine(pair, -0.5, 1.0))
    if beta == 0.0:
        return loss_cos
    return nm.add(loss_cos, nm.scale(loss_sup, beta))


def lr_at_step(step: int, config: TrainConfig, total_steps: int) -> float:
    """Linear warmup then cosine decay to zero at the final step."""
    if step < 0 or step > total_steps:
        raise ScheduleError(f"step {step} outside [0, {total_steps}]")
    if step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    span = max(1, total_steps - config.warmup_steps)
    return config.lr * 0.5 * (1.0 + float(np.cos(np.pi * (step - config.warmup_steps) / span)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled weight decay Adam; state dtype follows each parameter."""

    def __init__(self, params: list[Tensor], weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.moment1 = [np.zeros_like(p.data) for p in self.params]
        self.moment2 = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for p, m1, m2 in zip(self.params, self.moment1, self.moment2):
            if p.grad is None:
                continue
            g = p.grad
            m1 *= self.beta1
            m1 += (1.0 - self.beta1) * g
            m2 *= self.beta2
            m2 += (1.0 - self.beta2) * g * g
            update = (m1 / bias1) / (np.sqrt(m2 / bias2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        nm.zero_grads(self.params)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainData:
    """Immutable training fixtures: features, database indices, triplets."""

    image_feats: EmbeddingMatrix
    caption_feats: EmbeddingMatrix
    db_image_index: FlatIndex
    db_caption_index: FlatIndex
    triplets: dict[int, PseudoTriplet]  # by image id


@dataclass
class TrainState:
    config: TrainConfig
    phi_m: BkpParams
    phi_a: BkpParams
    composer: FrozenComposer
    data: TrainData
    optimizer: AdamW
    rng: np.random.Generator
    step: int = 0
    prompt: TokenSequence = field(default_factory=lambda: make_prompt(3))

    @property
    def total_steps(self) -> int:
        return self.config.total_steps(self.data.image_feats.count)


def init_state(config: TrainConfig, composer: FrozenComposer, data: TrainData) -> TrainState:
    from . import bkp

    phi_m = bkp.init(config.seed + 1, config.dim, config.layers, config.heads)
    phi_a = bkp.init(config.seed + 2, config.dim, config.layers, config.heads)
    optimizer = AdamW(
        phi_m.params() + phi_a.params(),
        weight_decay=config.weight_decay,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_eps,
    )
    return TrainState(
        config=config,
        phi_m=phi_m,
        phi_a=phi_a,
        composer=composer,
        data=data,
        optimizer=optimizer,
        rng=rng_for(config.seed, "train"),
    )


def _fetch_context_batch(data: TrainData, queries: np.ndarray, k: int):
    img_ids, _ = data.db_image_index.search_batch(queries, k)
    cap_ids, _ = data.db_caption_index.search_batch(queries, k)
    img_ctx = data.db_image_index.matrix.values[img_ids]
    cap_ctx = data.db_caption_index.matrix.values[cap_ids]
    return img_ctx, cap_ctx


def _stream_m_loss(state: TrainState, refs: np.ndarray, img_ctx, cap_ctx) -> Tensor:
    blocks = project_batch(state.phi_m, nm.constant(refs), nm.constant(img_ctx), nm.constant(cap_ctx))
    composed = compose_batch(state.composer, [state.prompt] * len(refs), blocks)
    return contrastive_loss(nm.constant(refs), composed, state.config.tau)


def _stream_a_loss(state: TrainState, ids: np.ndarray, refs: np.ndarray, img_ctx, cap_ctx) -> Tensor:
    cfg = state.config
    caps = state.data.caption_feats.values
    prompt_only = cfg.prompt_only_templates

    groups: dict[int, list[int]] = {}
    templates: list[TokenSequence] = []
    for bi, item_id in enumerate(ids):
        trip = state.data.triplets[int(item_id)]
        template = state.prompt if prompt_only else trip.template
        templates.append(template)
        groups.setdefault(len(template), []).append(bi)

    nbatch = len(ids)
    all_blocks = project_batch(state.phi_a, nm.constant(refs), nm.constant(img_ctx), nm.constant(cap_ctx))
    partials: list[Tensor] = []
    for indices in groups.values():
        sel = np.asarray(indices, dtype=np.int64)
        blocks = nm.take_rows(all_blocks, sel)
        composed = compose_batch(state.composer, [templates[i] for i in indices], blocks)
        trips = [state.data.triplets[int(ids[i])] for i in indices]
        target = nm.constant(caps[[t.target_caption_id for t in trips]])
        comp_a = nm.constant(caps[[t.complement_ids[0] for t in trips]])
        comp_b = nm.constant(caps[[t.complement_ids[1] for t in trips]])
        group_mean = registration_loss_batch(composed, target, comp_a, comp_b, cfg.beta)
        partials.append(nm.scale(group_mean, len(indices) / nbatch))
    total = partials[0]
    for part in partials[1:]:
        total = nm.add(total, part)
    return total


def train_step(state: TrainState, ids: np.ndarray) -> tuple[float, float]:
    """One optimization step over the sampled item ids; returns (L_c, L_r)."""
    cfg = state.config
    refs = state.data.image_feats.values[ids]
    img_ctx, cap_ctx = _fetch_context_batch(state.data, refs, cfg.k)

    run_m = not cfg.alternate_streams or state.step % 2 == 0
    run_a = not cfg.alternate_streams or state.step % 2 == 1

    loss_c = _stream_m_loss(state, refs, img_ctx, cap_ctx) if run_m else None
    loss_r = _stream_a_loss(state, ids, refs, img_ctx, cap_ctx) if run_a else None

    if loss_c is not None and loss_r is not None:
        total = nm.add(loss_c, loss_r)
    else:
        total = loss_c if loss_c is not None else loss_r

    nm.backward(total)
    lr = lr_at_step(state.step, cfg, state.total_steps)
    state.optimizer.step(lr)
    state.optimizer.zero_grad()
    state.step += 1
    return (
        float(loss_c.data) if loss_c is not None else float("nan"),
        float(loss_r.data) if loss_r is not None else float("nan"),
    )


def run_training(
    state: TrainState,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
    log_every: int = 1,
) -> list[dict]:
    """Drive train_step to the configured horizon; returns the log rows."""
    total = state.total_steps
    n_items = state.data.image_feats.count
    rows = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        while state.step < total:
            ids = state.rng.choice(n_items, size=min(state.config.batch_size, n_items), replace=False)
            step_before = state.step
            loss_c, loss_r = train_step(state, ids)
            lr = lr_at_step(step_before, state.config, total)
            if step_before % log_every == 0 or state.step == total:
                row = {"step": step_before, "lr": lr, "L_c": loss_c, "L_r": loss_r}
                rows.append(row)
                if log_fh:
                    log_fh.write(json.dumps(row) + "\n")
            if step_before % 200 == 0:
                log.info("step %d/%d lr=%.3g L_c=%.4f L_r=%.4f", step_before, total, lr, loss_c, loss_r)
            if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
        if checkpoint_path:
            save_checkpoint(state, checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()
    return rows


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _named_state(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = []
    for prefix, params in (("m", state.phi_m), ("a", state.phi_a)):
        for name, tensor in params.named_params():
            out.append((f"{prefix}.{name}", tensor.data))
    for pi, (m1, m2) in enumerate(zip(state.optimizer.moment1, state.optimizer.moment2)):
        out.append((f"opt.{pi}.m1", m1))
        out.append((f"opt.{pi}.m2", m2))
    return out


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    segments = _named_state(state)
    rng_blob = json.dumps(state.rng.bit_generator.state).encode()
    parts = [
        CKPT_MAGIC,
        struct.pack("<IQ", CKPT_VERSION, state.step),
        state.config.digest(),
        struct.pack("<I", len(segments)),
    ]
    for name, values in segments:
        encoded = encode_matrix(values)
        parts.append(struct.pack("<I", len(name)))
        parts.append(name.encode())
        parts.append(struct.pack("<Q", len(encoded)))
        parts.append(encoded)
    parts.append(struct.pack("<I", len(rng_blob)))
    parts.append(rng_blob)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(state: TrainState, path: str | Path) -> None:
    """Restore parameters, optimizer moments, step, and RNG state in place."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}")
    offset = 4
    version, step = struct.unpack_from("<IQ", raw, offset)
    offset += struct.calcsize("<IQ")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    digest = raw[offset: offset + 32]
    offset += 32
    if digest != state.config.digest():
        raise ConfigError("checkpoint config digest does not match the active config")
    (n_segments,) = struct.unpack_from("<I", raw, offset)
    offset += 4

    loaded: dict[str, np.ndarray] = {}
    for _ in range(n_segments):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset: offset + name_len].decode()
        offset += name_len
        (payload_len,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        values, _ = decode_matrix(raw[offset: offset + payload_len])
        offset += payload_len
        loaded[name] = values
    (blob_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    rng_state = json.loads(raw[offset: offset + blob_len].decode())

    expected = _named_state(state)
    if set(loaded) != {name for name, _ in expected}:
        raise FormatError("checkpoint segments do not match the model layout")
    for name, destination in expected:
        values = loaded[name].reshape(destination.shape)
        destination[...] = values
    state.step = step
    state.optimizer.step_count = step
    state.rng.bit_generator.state = rng_state
