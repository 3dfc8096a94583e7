"""Synthetic attribute-world corpus for desk-scale training and evaluation.

Every item is a vector of binary attributes. The first ``subject_attrs``
bits define a subject class (a "noun"); the rest are modifier attributes.
Features live in the composer's token geometry: the projection matrix W
is assembled from the composer's own vocabulary rows for the subject and
attribute tokens, which plays the role of a pretrained dual encoder's
image-text alignment. Image features encode the full attribute pattern,
caption features encode the subject plus a described subset, both as
normalize(W @ one_hot + sigma * noise).

Composed-retrieval tasks flip one modifier attribute of a reference item;
the target is the unique candidate carrying the flipped pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import TOKEN_A, TOKEN_OF, TOKEN_PHOTO, FrozenComposer, Slot, Tok, TokenSequence
from .errors import ConfigError
from .evalkit import EvalTask
from .seeding import rng_for
from .store import EmbeddingMatrix, KnowledgeRecord, normalize_rows

SUBJECT_TOKEN_BASE = 8


@dataclass
class SynthConfig:
    n_train: int = 5000
    n_db: int = 4000
    n_tasks: int = 500
    n_attributes: int = 8
    subject_attrs: int = 2
    dim: int = 64
    sigma: float = 0.05
    min_described: int = 1
    max_described: int = 4
    max_candidates: int = 0  # 0 keeps every non-target-pattern eval item

    def __post_init__(self):
        if not 1 <= self.subject_attrs < self.n_attributes:
            raise ConfigError("subject_attrs must be in [1, n_attributes)")
        if self.min_described < 0 or self.max_described < self.min_described:
            raise ConfigError("described-attribute bounds are inconsistent")
        if self.max_described > self.n_attributes - self.subject_attrs:
            raise ConfigError("max_described exceeds available modifier attributes")

    @property
    def n_subject_classes(self) -> int:
        return 1 << self.subject_attrs

    @property
    def n_modifiers(self) -> int:
        return self.n_attributes - self.subject_attrs

    @property
    def attr_token_base(self) -> int:
        return SUBJECT_TOKEN_BASE + self.n_subject_classes

    @property
    def latent_dim(self) -> int:
        return self.n_subject_classes + 2 * self.n_modifiers

    def required_vocab(self) -> int:
        return self.attr_token_base + 2 * self.n_modifiers

    def subject_token(self, attrs: np.ndarray) -> int:
        cls = 0
        for bit in attrs[: self.subject_attrs]:
            cls = (cls << 1) | int(bit)
        return SUBJECT_TOKEN_BASE + cls

    def attr_token(self, modifier: int, value: int) -> int:
        return self.attr_token_base + 2 * modifier + int(value)

    def token_to_modifier(self, token_id: int) -> tuple[int, int]:
        rel = token_id - self.attr_token_base
        return rel // 2, rel % 2


@dataclass
class SynthCorpus:
    config: SynthConfig
    projection: np.ndarray  # (dim, latent_dim), shared by both modalities
    train_images: EmbeddingMatrix
    train_captions: EmbeddingMatrix
    train_records: list[KnowledgeRecord]
    train_attrs: np.ndarray
    db_images: EmbeddingMatrix
    db_captions: EmbeddingMatrix
    db_records: list[KnowledgeRecord]
    db_attrs: np.ndarray
    eval_images: EmbeddingMatrix
    eval_attrs: np.ndarray
    tasks: list[EvalTask]
    task_meta: list[dict] = field(default_factory=list)


def latent_code(config: SynthConfig, attrs: np.ndarray, described: set[int] | None = None) -> np.ndarray:
    """One-hot latent: subject class plus (modifier, value) slots.

    ``described=None`` encodes every modifier (image view); otherwise only
    the listed modifiers (caption view).
    """
    code = np.zeros(config.latent_dim, dtype=np.float32)
    cls = 0
    for bit in attrs[: config.subject_attrs]:
        cls = (cls << 1) | int(bit)
    code[cls] = 1.0
    for m in range(config.n_modifiers):
        if described is not None and m not in described:
            continue
        value = int(attrs[config.subject_attrs + m])
        code[config.n_subject_classes + 2 * m + value] = 1.0
    return code


def _projection_from_composer(config: SynthConfig, composer: FrozenComposer) -> np.ndarray:
    if composer.vocab_size < config.required_vocab():
        raise ConfigError(
            f"composer vocab {composer.vocab_size} < required {config.required_vocab()}"
        )
    cols = []
    for c in range(config.n_subject_classes):
        cols.append(composer.vocab[SUBJECT_TOKEN_BASE + c])
    for m in range(config.n_modifiers):
        for v in (0, 1):
            cols.append(composer.vocab[config.attr_token(m, v)])
    return np.stack(cols, axis=1).astype(np.float32)


def _features(projection: np.ndarray, codes: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    raw = codes @ projection.T
    if sigma > 0.0:
        raw = raw + sigma * rng.standard_normal(raw.shape).astype(np.float32)
    return normalize_rows(raw.astype(np.float32))


def _caption_record(config: SynthConfig, idx: int, attrs: np.ndarray, described: list[int]) -> KnowledgeRecord:
    # captions carry the same fixed prefix the prompt template uses, so
    # alignment templates and inference templates share their shape
    tokens = [TOKEN_A, TOKEN_PHOTO, TOKEN_OF, config.subject_token(attrs)]
    for m in sorted(described):
        tokens.append(config.attr_token(m, int(attrs[config.subject_attrs + m])))
    return KnowledgeRecord(id=idx, caption_tokens=tokens, subject_span=(3, 4))


def _pattern_key(attrs: np.ndarray) -> bytes:
    return np.ascontiguousarray(attrs, dtype=np.int8).tobytes()


def synth_generate(config: SynthConfig, composer: FrozenComposer, seed: int) -> SynthCorpus:
    """Deterministic corpus: train and database splits plus held-out tasks."""
    rng = rng_for(seed, "synth")
    projection = _projection_from_composer(config, composer)
    a_total = config.n_attributes

    def make_split(n: int):
        attrs = rng.integers(0, 2, size=(n, a_total), dtype=np.int8)
        described, records = [], []
        for i in range(n):
            count = int(rng.integers(config.min_described, config.max_described + 1))
            mods = sorted(rng.choice(config.n_modifiers, size=count, replace=False).tolist()) if count else []
            described.append(mods)
            records.append(_caption_record(config, i, attrs[i], mods))
        img_codes = np.stack([latent_code(config, attrs[i]) for i in range(n)])
        cap_codes = np.stack([latent_code(config, attrs[i], set(described[i])) for i in range(n)])
        images = EmbeddingMatrix(_features(projection, img_codes, config.sigma, rng), normalized=True)
        captions = EmbeddingMatrix(_features(projection, cap_codes, config.sigma, rng), normalized=True)
        return attrs, records, images, captions

    train_attrs, train_records, train_images, train_captions = make_split(config.n_train)
    db_attrs, db_records, db_images, db_captions = make_split(config.n_db)

    # held-out tasks: each contributes a fresh reference item and target item
    eval_attrs = np.zeros((2 * config.n_tasks, a_total), dtype=np.int8)
    flips = []
    for t in range(config.n_tasks):
        ref = rng.integers(0, 2, size=a_total, dtype=np.int8)
        modifier = int(rng.integers(0, config.n_modifiers))
        tgt = ref.copy()
        pos = config.subject_attrs + modifier
        tgt[pos] = 1 - tgt[pos]
        eval_attrs[2 * t] = ref
        eval_attrs[2 * t + 1] = tgt
        flips.append((modifier, int(tgt[pos])))

    eval_codes = np.stack([latent_code(config, eval_attrs[i]) for i in range(len(eval_attrs))])
    eval_images = EmbeddingMatrix(_features(projection, eval_codes, config.sigma, rng), normalized=True)

    patterns = [_pattern_key(eval_attrs[i]) for i in range(len(eval_attrs))]
    tasks, task_meta = [], []
    for t in range(config.n_tasks):
        ref_id, tgt_id = 2 * t, 2 * t + 1
        modifier, new_value = flips[t]
        tgt_pattern = patterns[tgt_id]
        # standard composed-retrieval protocol: the reference is not a candidate
        pool = [i for i in range(len(eval_attrs)) if patterns[i] != tgt_pattern and i != ref_id]
        if config.max_candidates and len(pool) > config.max_candidates - 1:
            keep = rng.choice(len(pool), size=config.max_candidates - 1, replace=False)
            pool = [pool[j] for j in sorted(keep.tolist())]
            if ref_id not in pool:
                pool.append(ref_id)
        candidates = sorted(pool + [tgt_id])
        template = TokenSequence(
            [Tok(TOKEN_A), Tok(TOKEN_PHOTO), Tok(TOKEN_OF), Slot(0), Slot(1), Slot(2),
             Tok(config.attr_token(modifier, new_value))]
        )
        tasks.append(
            EvalTask(
                reference_image_id=ref_id,
                instruction_tokens=template,
                candidate_ids=candidates,
                target_ids=[tgt_id],
            )
        )
        task_meta.append({"flip_modifier": modifier, "new_value": new_value})

    return SynthCorpus(
        config=config,
        projection=projection,
        train_images=train_images,
        train_captions=train_captions,
        train_records=train_records,
        train_attrs=train_attrs,
        db_images=db_images,
        db_captions=db_captions,
        db_records=db_records,
        db_attrs=db_attrs,
        eval_images=eval_images,
        eval_attrs=eval_attrs,
        tasks=tasks,
        task_meta=task_meta,
    )
