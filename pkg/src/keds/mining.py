"""Pseudo-triplet mining from image-caption pairs.

Each record with a subject span yields one triplet: the caption template
with the span replaced by three pseudo slots, the caption itself as the
alignment target, and the two most similar other captions as complements.
Records without spans are skipped and counted, not fatal.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .encoders import TokenSequence, inject_span
from .errors import MiningError
from .store import FlatIndex, KnowledgeRecord, search_topk

log = logging.getLogger("keds.mining")

PSEUDO_ROWS = 3


@dataclass
class PseudoTriplet:
    image_id: int
    template: TokenSequence
    target_caption_id: int
    complement_ids: tuple[int, int]

    def __post_init__(self):
        a, b = self.complement_ids
        if a == b or self.target_caption_id in (a, b):
            raise MiningError(
                f"complements {self.complement_ids} invalid for target {self.target_caption_id}"
            )
        if self.template.slot_count() != PSEUDO_ROWS:
            raise MiningError(f"template must carry exactly {PSEUDO_ROWS} slots")


def find_complements(caption_id: int, caption_index: FlatIndex) -> tuple[int, int]:
    """Top-2 captions by feature similarity, excluding the caption itself."""
    if caption_index.count < 3:
        raise MiningError(f"need at least 3 captions, index holds {caption_index.count}")
    query = caption_index.matrix.values[caption_id]
    hits = search_topk(caption_index, query, k=3)
    picked = [hit_id for hit_id, _ in hits if hit_id != caption_id][:2]
    if len(picked) < 2:
        # the id appeared more than once in top-3 only if k was clipped; widen
        hits = search_topk(caption_index, query, k=caption_index.count)
        picked = [hit_id for hit_id, _ in hits if hit_id != caption_id][:2]
    if len(picked) < 2:
        raise MiningError(f"fewer than 2 other captions for caption {caption_id}")
    return picked[0], picked[1]


def mine(records: list[KnowledgeRecord], caption_index: FlatIndex) -> list[PseudoTriplet]:
    """One triplet per spanned record; complements come from the same corpus."""
    if caption_index.count < 3:
        raise MiningError(f"corpus of {caption_index.count} captions is too small to mine")
    triplets: list[PseudoTriplet] = []
    skipped = 0
    for rec in records:
        if rec.subject_span is None:
            skipped += 1
            continue
        template = inject_span(rec, PSEUDO_ROWS)
        comp = find_complements(rec.id, caption_index)
        triplets.append(
            PseudoTriplet(
                image_id=rec.id,
                template=template,
                target_caption_id=rec.id,
                complement_ids=comp,
            )
        )
    if skipped:
        log.warning("mining skipped %d records without subject spans", skipped)
    return triplets


def save_triplets(triplets: list[PseudoTriplet], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for t in triplets:
            fh.write(
                json.dumps(
                    {
                        "image_id": t.image_id,
                        "template": t.template.to_json_items(),
                        "target": t.target_caption_id,
                        "complements": list(t.complement_ids),
                    }
                )
                + "\n"
            )
    tmp.replace(path)


def load_triplets(path: str | Path) -> list[PseudoTriplet]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(
                PseudoTriplet(
                    image_id=int(obj["image_id"]),
                    template=TokenSequence.from_json_items(obj["template"]),
                    target_caption_id=int(obj["target"]),
                    complement_ids=(int(obj["complements"][0]), int(obj["complements"][1])),
                )
            )
    return out
