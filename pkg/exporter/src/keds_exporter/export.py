"""The export job: dataset JSONL -> engine banks + metadata + vocabulary.

The dataset is line-delimited JSON with {"image": <path>, "caption":
<text>} per pair; image paths resolve relative to the dataset file.
Unreadable images are skipped and counted. Records are emitted in dataset
order, re-numbered densely so bank row ids match metadata line ids.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import build_encoder
from .formats import write_bank, write_records, write_vocab
from .subjects import subject_span
from .tokenizer import VocabMapping, tokenize

log = logging.getLogger("keds_exporter")


@dataclass
class ExportManifest:
    dataset: str
    encoder: str = "seeded:64"
    output_dir: str = "export"
    dim: int = 64
    image_bank: str = "db_images.kedb"
    caption_bank: str = "db_captions.kedb"
    metadata: str = "db_meta.jsonl"
    vocab: str = "vocab.json"
    batch_size: int = 64

    @staticmethod
    def from_json(path: str | Path) -> "ExportManifest":
        data = json.loads(Path(path).read_text())
        return ExportManifest(**data)


@dataclass
class ExportResult:
    exported: int
    skipped: int
    vocab_size: int
    paths: dict[str, Path] = field(default_factory=dict)


def _load_pairs(dataset: Path) -> list[tuple[Path, str]]:
    pairs = []
    with open(dataset) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            pairs.append((dataset.parent / obj["image"], str(obj["caption"])))
    return pairs


def export(manifest: ExportManifest) -> ExportResult:
    dataset = Path(manifest.dataset)
    if not dataset.exists():
        raise FileNotFoundError(f"dataset not found: {dataset}")
    encoder = build_encoder(manifest.encoder)
    if encoder.dim != manifest.dim:
        raise ValueError(f"encoder dim {encoder.dim} != manifest dim {manifest.dim}")

    pairs = _load_pairs(dataset)
    blobs, captions = [], []
    skipped = 0
    for image_path, caption in pairs:
        try:
            blobs.append(image_path.read_bytes())
            captions.append(caption)
        except OSError:
            skipped += 1
            log.warning("skipping unreadable image %s", image_path)

    image_feats = np.zeros((len(blobs), manifest.dim), dtype=np.float32)
    caption_feats = np.zeros((len(blobs), manifest.dim), dtype=np.float32)
    for start in range(0, len(blobs), manifest.batch_size):
        stop = start + manifest.batch_size
        image_feats[start:stop] = encoder.encode_images(blobs[start:stop])
        caption_feats[start:stop] = encoder.encode_texts(captions[start:stop])

    vocab = VocabMapping()
    records = []
    for idx, caption in enumerate(captions):
        words = tokenize(caption)
        span = subject_span(caption)
        records.append({
            "id": idx,
            "caption_tokens": vocab.encode(words),
            "subject_span": list(span) if span is not None else None,
            "text": caption,
        })

    out = Path(manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "image_bank": out / manifest.image_bank,
        "caption_bank": out / manifest.caption_bank,
        "metadata": out / manifest.metadata,
        "vocab": out / manifest.vocab,
    }
    write_bank(image_feats, paths["image_bank"], normalized=True)
    write_bank(caption_feats, paths["caption_bank"], normalized=True)
    write_records(records, paths["metadata"])
    write_vocab(vocab.word_to_id, paths["vocab"])
    log.info("exported %d pairs (%d skipped) to %s", len(records), skipped, out)
    return ExportResult(exported=len(records), skipped=skipped, vocab_size=vocab.size, paths=paths)
