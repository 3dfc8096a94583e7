"""Hybrid inference, retrieval baselines, recall metrics, and ablation sweeps.

Candidate scoring is inner product on normalized features, matching the
training similarity. Rankings sort by score descending with ascending-id
tie-breaks, so evaluation is deterministic and order-independent in the
candidate list.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import numeric as nm
from .bkp import BkpParams, project_batch
from .encoders import EmbeddingProvider, FrozenComposer, TokenSequence, compose_batch
from .errors import ConfigError
from .store import FlatIndex, IvfIndex

log = logging.getLogger("keds.evalkit")

KNOCKOUTS = ("wo_topk_img", "wo_topk_cap", "wo_phi_a", "wo_context", "wo_extra")


@dataclass
class EvalTask:
    """A composed-retrieval query: reference image + instruction template."""

    reference_image_id: int
    instruction_tokens: TokenSequence
    candidate_ids: list[int]
    target_ids: list[int]

    def __post_init__(self):
        if not self.target_ids:
            raise ConfigError("task needs at least one target id")
        missing = set(self.target_ids) - set(self.candidate_ids)
        if missing:
            raise ConfigError(f"target ids {sorted(missing)} not in candidate pool")


@dataclass
class InferenceConfig:
    """Stream mixing and retrieval settings for evaluation."""

    alpha: float = 0.5
    k: int = 16
    streams: str = "both"  # "M" | "A" | "both"
    knockout: str | None = None
    nprobe: int = 0  # 0 = full probe when the database index is IVF

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha {self.alpha} outside [0, 1]")
        if self.streams not in ("M", "A", "both"):
            raise ConfigError(f"unknown streams mode {self.streams!r}")
        if self.knockout is not None and self.knockout not in KNOCKOUTS:
            raise ConfigError(f"unknown knockout {self.knockout!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")


@dataclass
class ModelBundle:
    """Everything evaluation needs: projections, composer, database, features."""

    phi_m: BkpParams
    phi_a: BkpParams
    composer: FrozenComposer
    db_image_index: FlatIndex | IvfIndex
    db_caption_index: FlatIndex | IvfIndex
    features: EmbeddingProvider  # reference and candidate image features


def hybrid_feature(stream_m: np.ndarray, stream_a: np.ndarray, alpha: float) -> np.ndarray:
    """alpha-blend of the two composed features, re-normalized for scoring."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha {alpha} outside [0, 1]")
    stream_m = np.asarray(stream_m, dtype=np.float32)
    stream_a = np.asarray(stream_a, dtype=np.float32)
    if stream_m.shape != stream_a.shape:
        raise ConfigError(f"stream features disagree: {stream_m.shape} vs {stream_a.shape}")
    mixed = alpha * stream_m + (1.0 - alpha) * stream_a
    norm = float(np.linalg.norm(mixed))
    return mixed / norm


def _order_ids(candidate_ids: np.ndarray, scores: np.ndarray) -> list[int]:
    order = np.lexsort((candidate_ids, -scores))
    return [int(candidate_ids[i]) for i in order]


def _fetch_contexts(bundle: ModelBundle, queries: np.ndarray, k: int, nprobe: int = 0):
    """Per-query top-k rows from both database banks, queried by image feature."""

    def topk_rows(index, q):
        if isinstance(index, IvfIndex):
            probes = nprobe if nprobe else index.partitions
            hits = index.search(q, k, nprobe=probes)
        else:
            hits = index.search(q, k)
        ids = [h[0] for h in hits]
        return ids, index.matrix.values[ids]

    img_ctx = np.zeros((len(queries), k, bundle.db_image_index.dim), dtype=np.float32)
    cap_ctx = np.zeros_like(img_ctx)
    for qi, q in enumerate(queries):
        _, img_rows = topk_rows(bundle.db_image_index, q)
        _, cap_rows = topk_rows(bundle.db_caption_index, q)
        img_ctx[qi, : len(img_rows)] = img_rows
        cap_ctx[qi, : len(cap_rows)] = cap_rows
    return img_ctx, cap_ctx


def _apply_knockout(blocks: np.ndarray, knockout: str | None) -> np.ndarray:
    if knockout == "wo_topk_img":
        blocks = blocks.copy()
        blocks[:, 1, :] = 0.0
    elif knockout == "wo_topk_cap":
        blocks = blocks.copy()
        blocks[:, 2, :] = 0.0
    return blocks


def _composed_features(
    params: BkpParams,
    bundle: ModelBundle,
    tasks: list[EvalTask],
    config: InferenceConfig,
) -> np.ndarray:
    """Compose every task's instruction with this stream's pseudo token."""
    refs = np.stack([bundle.features.lookup(t.reference_image_id) for t in tasks])
    img_ctx, cap_ctx = _fetch_contexts(bundle, refs, config.k, config.nprobe)
    blocks = project_batch(
        params,
        nm.constant(refs),
        nm.constant(img_ctx),
        nm.constant(cap_ctx),
    ).data
    blocks = _apply_knockout(blocks, config.knockout)

    out = np.zeros((len(tasks), bundle.composer.dim), dtype=np.float32)
    by_len: dict[int, list[int]] = {}
    for ti, task in enumerate(tasks):
        by_len.setdefault(len(task.instruction_tokens), []).append(ti)
    for indices in by_len.values():
        seqs = [tasks[ti].instruction_tokens for ti in indices]
        pseudo = nm.constant(blocks[indices])
        out[indices] = compose_batch(bundle.composer, seqs, pseudo).data
    return out


def evaluate_tasks(tasks: list[EvalTask], bundle: ModelBundle, config: InferenceConfig) -> list[list[int]]:
    """Rank every task's candidates; batches compositions by template length."""
    if not tasks:
        return []
    use_m = config.streams in ("M", "both") and config.knockout != "wo_phi_a"
    use_a = config.streams in ("A", "both") and config.knockout != "wo_phi_a"
    if config.knockout == "wo_phi_a":
        use_m, use_a = True, False

    feats_m = _composed_features(bundle.phi_m, bundle, tasks, config) if use_m else None
    feats_a = _composed_features(bundle.phi_a, bundle, tasks, config) if use_a else None

    rankings = []
    for ti, task in enumerate(tasks):
        if feats_m is not None and feats_a is not None:
            query = hybrid_feature(feats_m[ti], feats_a[ti], config.alpha)
        elif feats_m is not None:
            query = hybrid_feature(feats_m[ti], feats_m[ti], 1.0)
        else:
            query = hybrid_feature(feats_a[ti], feats_a[ti], 0.0)
        cand = np.asarray(sorted(task.candidate_ids), dtype=np.int64)
        scores = bundle.features.lookup_many(cand) @ query
        rankings.append(_order_ids(cand, scores))
    return rankings


def rank_candidates(task: EvalTask, bundle: ModelBundle, config: InferenceConfig) -> list[int]:
    """Ordered candidate ids for a single task."""
    return evaluate_tasks([task], bundle, config)[0]


def recall_at_k(rankings: list[list[int]], tasks: list[EvalTask], k: int) -> float:
    """Fraction of tasks whose top-k contains any target id."""
    if k < 1:
        raise ConfigError("recall cutoff must be >= 1")
    if not tasks:
        return 0.0
    hits = 0
    for ranking, task in zip(rankings, tasks):
        targets = set(task.target_ids)
        if targets.intersection(ranking[:k]):
            hits += 1
    return hits / len(tasks)


def recall_table(rankings: list[list[int]], tasks: list[EvalTask]) -> dict[str, float]:
    return {f"R{k}": recall_at_k(rankings, tasks, k) for k in (1, 5, 10, 50)}


def baselines(tasks: list[EvalTask], bundle: ModelBundle) -> dict[str, dict[str, float]]:
    """Image-only, text-only, and averaged image+text retrieval baselines."""
    ref = np.stack([bundle.features.lookup(t.reference_image_id) for t in tasks])
    ref_n = ref / np.maximum(np.linalg.norm(ref, axis=1, keepdims=True), 1e-12)

    text = np.zeros_like(ref)
    by_len: dict[int, list[int]] = {}
    for ti, task in enumerate(tasks):
        by_len.setdefault(len(task.instruction_tokens.drop_slots()), []).append(ti)
    for indices in by_len.values():
        seqs = [tasks[ti].instruction_tokens.drop_slots() for ti in indices]
        text[indices] = compose_batch(bundle.composer, seqs, None).data
    avg = ref_n + text
    avg = avg / np.maximum(np.linalg.norm(avg, axis=1, keepdims=True), 1e-12)

    queries = {"image_only": ref_n, "text_only": text, "image_text": avg}
    out = {}
    for name, qblock in queries.items():
        rankings = []
        for ti, task in enumerate(tasks):
            cand = np.asarray(sorted(task.candidate_ids), dtype=np.int64)
            scores = bundle.features.lookup_many(cand) @ qblock[ti]
            rankings.append(_order_ids(cand, scores))
        out[name] = recall_table(rankings, tasks)
    return out


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRunner:
    """Holds the evaluation fixtures plus an optional retraining hook.

    ``retrain`` receives config overrides (e.g. {"beta": 0.0} or
    {"db_size": 1000} or {"prompt_only_templates": True}) and returns a
    fresh bundle trained under them; train-time axes require it.
    """

    tasks: list[EvalTask]
    bundle: ModelBundle
    config: InferenceConfig
    seed: int = 0
    retrain: Callable[[dict], ModelBundle] | None = None

    def _eval(self, bundle: ModelBundle, config: InferenceConfig) -> dict[str, float]:
        rankings = evaluate_tasks(self.tasks, bundle, config)
        return recall_table(rankings, self.tasks)


def ablation_sweep(axis: str, values: list, runner: SweepRunner) -> list[dict]:
    """One report row per value; see KNOCKOUTS for the knockout axis."""
    rows = []
    for value in values:
        if axis == "alpha":
            table = runner._eval(runner.bundle, replace(runner.config, alpha=float(value), streams="both"))
        elif axis == "k":
            table = runner._eval(runner.bundle, replace(runner.config, k=int(value)))
        elif axis == "db_size":
            if runner.retrain is None:
                raise ConfigError("db_size axis needs a retrain hook")
            table = runner._eval(runner.retrain({"db_size": int(value)}), runner.config)
        elif axis == "beta":
            if runner.retrain is None:
                raise ConfigError("beta axis needs a retrain hook")
            table = runner._eval(runner.retrain({"beta": float(value)}), runner.config)
        elif axis == "knockout":
            if value not in KNOCKOUTS:
                raise ConfigError(f"unknown knockout {value!r}")
            if value == "wo_phi_a":
                table = runner._eval(runner.bundle, replace(runner.config, alpha=1.0, streams="both"))
            elif value in ("wo_topk_img", "wo_topk_cap"):
                table = runner._eval(runner.bundle, replace(runner.config, knockout=value))
            elif value == "wo_context":
                if runner.retrain is None:
                    raise ConfigError("wo_context needs a retrain hook")
                table = runner._eval(runner.retrain({"prompt_only_templates": True}), runner.config)
            else:  # wo_extra
                if runner.retrain is None:
                    raise ConfigError("wo_extra needs a retrain hook")
                table = runner._eval(runner.retrain({"beta": 0.0}), runner.config)
        else:
            raise ConfigError(f"unknown ablation axis {axis!r}")
        row = {"axis": axis, "value": value, **table, "n_tasks": len(runner.tasks), "seed": runner.seed}
        rows.append(row)
        log.info("sweep %s=%s -> %s", axis, value, table)
    return rows


def write_report(rows: list[dict], path: str | Path, echo: bool = False) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    if echo:
        header = f"{'axis':<12}{'value':<14}{'R1':>8}{'R5':>8}{'R10':>8}{'R50':>8}"
        print(header)
        for row in rows:
            print(
                f"{row['axis']:<12}{str(row['value']):<14}"
                f"{row['R1']:>8.3f}{row['R5']:>8.3f}{row['R10']:>8.3f}{row['R50']:>8.3f}"
            )


def save_tasks(tasks: list[EvalTask], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for t in tasks:
            fh.write(
                json.dumps(
                    {
                        "reference_id": t.reference_image_id,
                        "template": t.instruction_tokens.to_json_items(),
                        "candidate_ids": t.candidate_ids,
                        "target_ids": t.target_ids,
                    }
                )
                + "\n"
            )
    tmp.replace(path)


def load_tasks(path: str | Path) -> list[EvalTask]:
    tasks = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            tasks.append(
                EvalTask(
                    reference_image_id=int(obj["reference_id"]),
                    instruction_tokens=TokenSequence.from_json_items(obj["template"]),
                    candidate_ids=[int(c) for c in obj["candidate_ids"]],
                    target_ids=[int(t) for t in obj["target_ids"]],
                )
            )
    return tasks
