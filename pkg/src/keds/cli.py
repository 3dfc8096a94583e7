"""Pipeline front door: gen-synth | build-db | mine | train | eval | sweep | gradcheck.

One JSON config drives every command; flags override config values. All
randomness splits off the root seed. KEDS_LOG={error|info|debug} controls
verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

log = logging.getLogger("keds.cli")


def _set_thread_env(threads: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, str(threads))


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keds", description=__doc__)
    parser.add_argument("command", choices=["gen-synth", "build-db", "mine", "train", "eval", "sweep", "gradcheck"])
    parser.add_argument("--config", type=Path, default=None, help="JSON run config")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--alpha", type=float, default=None)
    parser.add_argument("--beta", type=float, default=None)
    parser.add_argument("--topk", type=int, default=None)
    parser.add_argument("--db", type=Path, default=None, help="database directory override")
    parser.add_argument("--out", type=Path, default=Path("runs/desk"), help="working directory")
    parser.add_argument("--streams", choices=["M", "A", "both"], default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--axis", default=None, help="sweep axis (alpha|k|db_size|beta|knockout)")
    parser.add_argument("--values", default=None, help="comma-separated sweep values")
    return parser


class Workspace:
    """File layout under the run directory."""

    def __init__(self, out: Path, db_override: Path | None = None):
        self.out = out
        self.synth_dir = out / "synth"
        self.db_dir = db_override if db_override is not None else self.synth_dir
        self.train_images = self.synth_dir / "train_images.kedb"
        self.train_captions = self.synth_dir / "train_captions.kedb"
        self.train_meta = self.synth_dir / "train_meta.jsonl"
        self.eval_images = self.synth_dir / "eval_images.kedb"
        self.tasks = self.synth_dir / "tasks.jsonl"
        self.db_images = self.db_dir / "db_images.kedb"
        self.db_captions = self.db_dir / "db_captions.kedb"
        self.db_meta = self.db_dir / "db_meta.jsonl"
        self.db_index = out / "db_index.json"
        self.triplets = out / "triplets.jsonl"
        self.checkpoint = out / "checkpoint.kedc"
        self.train_log = out / "train_log.jsonl"
        self.report = out / "report.jsonl"

    def require(self, *paths: Path) -> None:
        from .errors import PathError

        for p in paths:
            if not p.exists():
                raise PathError(f"required input missing: {p}")


def _composer_for(rc) -> "FrozenComposer":
    from .encoders import build_composer

    m = rc.model
    return build_composer(rc.seed, dim=m.dim, vocab_size=m.vocab_size, max_len=m.max_len,
                          blocks=m.composer_blocks, heads=m.composer_heads, block_gain=m.composer_gain)


def _index_for(rc, matrix, label: str):
    from . import store
    from .seeding import split_seed

    if rc.store.index == "flat":
        return store.FlatIndex(matrix)
    partitions = rc.store.partitions or max(1, int(round(math.sqrt(matrix.count))))
    return store.build_ivf(matrix, partitions, rc.store.iterations, seed=split_seed(rc.seed, f"ivf-{label}"))


def cmd_gen_synth(rc, ws: Workspace) -> int:
    from . import store
    from .evalkit import save_tasks
    from .synth import synth_generate

    composer = _composer_for(rc)
    corpus = synth_generate(rc.synth, composer, rc.seed)
    ws.synth_dir.mkdir(parents=True, exist_ok=True)
    store.save(corpus.train_images, ws.train_images)
    store.save(corpus.train_captions, ws.train_captions)
    store.save_records(corpus.train_records, ws.train_meta)
    store.save(corpus.db_images, ws.db_images)
    store.save(corpus.db_captions, ws.db_captions)
    store.save_records(corpus.db_records, ws.db_meta)
    store.save(corpus.eval_images, ws.eval_images)
    save_tasks(corpus.tasks, ws.tasks)
    log.info("synth corpus written under %s (train=%d, db=%d, tasks=%d)",
             ws.synth_dir, corpus.train_images.count, corpus.db_images.count, len(corpus.tasks))
    return 0


def cmd_build_db(rc, ws: Workspace) -> int:
    from . import store

    ws.require(ws.db_images, ws.db_captions)
    images = store.load(ws.db_images)
    captions = store.load(ws.db_captions)
    img_index = _index_for(rc, images, "img")
    cap_index = _index_for(rc, captions, "cap")
    summary = {
        "index": rc.store.index,
        "rows": images.count,
        "dim": images.dim,
        "partitions": getattr(img_index, "partitions", 1) if rc.store.index == "ivf" else 1,
        "nprobe": rc.store.nprobe,
        "iterations": rc.store.iterations,
        "seed": rc.seed,
    }
    ws.out.mkdir(parents=True, exist_ok=True)
    ws.db_index.write_text(json.dumps(summary, indent=2) + "\n")
    del cap_index
    log.info("database indices validated: %s", summary)
    return 0


def cmd_mine(rc, ws: Workspace) -> int:
    from . import store
    from .mining import mine, save_triplets

    ws.require(ws.train_meta, ws.train_captions)
    records = store.load_records(ws.train_meta)
    captions = store.load(ws.train_captions)
    triplets = mine(records, store.FlatIndex(captions))
    ws.out.mkdir(parents=True, exist_ok=True)
    save_triplets(triplets, ws.triplets)
    log.info("mined %d triplets -> %s", len(triplets), ws.triplets)
    return 0


def _load_train_state(rc, ws: Workspace):
    from . import store, trainer
    from .mining import load_triplets

    ws.require(ws.train_images, ws.train_captions, ws.db_images, ws.db_captions, ws.triplets)
    data = trainer.TrainData(
        image_feats=store.load(ws.train_images),
        caption_feats=store.load(ws.train_captions),
        db_image_index=store.FlatIndex(store.load(ws.db_images)),
        db_caption_index=store.FlatIndex(store.load(ws.db_captions)),
        triplets={t.image_id: t for t in load_triplets(ws.triplets)},
    )
    cfg = trainer.TrainConfig(
        lr=rc.train.lr, weight_decay=rc.train.weight_decay, warmup_steps=rc.train.warmup_steps,
        epochs=rc.train.epochs, batch_size=rc.train.batch_size, steps=rc.train.steps,
        tau=rc.train.tau, beta=rc.train.beta, k=rc.train.k, seed=rc.seed,
        dim=rc.model.dim, layers=rc.model.bkp_layers, heads=rc.model.heads,
        alternate_streams=rc.train.alternate_streams,
        prompt_only_templates=rc.train.prompt_only_templates,
    )
    state = trainer.init_state(cfg, _composer_for(rc), data)
    return state


def cmd_train(rc, ws: Workspace) -> int:
    from . import trainer

    state = _load_train_state(rc, ws)
    ws.out.mkdir(parents=True, exist_ok=True)
    if ws.train_log.exists():
        ws.train_log.unlink()
    trainer.run_training(
        state,
        log_path=ws.train_log,
        checkpoint_path=ws.checkpoint,
        checkpoint_every=rc.train.checkpoint_every,
        log_every=rc.train.log_every,
    )
    log.info("training complete at step %d; checkpoint %s", state.step, ws.checkpoint)
    return 0


def _bundle_from_checkpoint(rc, ws: Workspace):
    from . import store, trainer
    from .encoders import EmbeddingProvider
    from .evalkit import ModelBundle

    state = _load_train_state(rc, ws)
    ws.require(ws.checkpoint, ws.eval_images)
    trainer.load_checkpoint(state, ws.checkpoint)
    bundle = ModelBundle(
        phi_m=state.phi_m,
        phi_a=state.phi_a,
        composer=state.composer,
        db_image_index=state.data.db_image_index,
        db_caption_index=state.data.db_caption_index,
        features=EmbeddingProvider(store.load(ws.eval_images)),
    )
    return state, bundle


def cmd_eval(rc, ws: Workspace) -> int:
    from .evalkit import InferenceConfig, baselines, evaluate_tasks, load_tasks, recall_table, write_report

    _, bundle = _bundle_from_checkpoint(rc, ws)
    ws.require(ws.tasks)
    tasks = load_tasks(ws.tasks)
    config = InferenceConfig(alpha=rc.eval.alpha, k=rc.eval.k, streams=rc.eval.streams)
    rankings = evaluate_tasks(tasks, bundle, config)
    rows = [{"axis": "model", "value": f"keds-{config.streams}-a{config.alpha}", **recall_table(rankings, tasks),
             "n_tasks": len(tasks), "seed": rc.seed}]
    for name, table in baselines(tasks, bundle).items():
        rows.append({"axis": "baseline", "value": name, **table, "n_tasks": len(tasks), "seed": rc.seed})
    write_report(rows, ws.report, echo=True)
    log.info("report written to %s", ws.report)
    return 0


def cmd_sweep(rc, ws: Workspace, axis: str | None, values_arg: str | None) -> int:
    from .errors import ConfigError
    from .evalkit import InferenceConfig, SweepRunner, ablation_sweep, load_tasks, write_report

    if not axis:
        raise ConfigError("sweep needs --axis")
    raw_values = (values_arg or "").split(",") if values_arg else []
    if not raw_values:
        raise ConfigError("sweep needs --values (comma separated)")
    if axis in ("alpha", "beta"):
        values = [float(v) for v in raw_values]
    elif axis in ("k", "db_size"):
        values = [int(v) for v in raw_values]
    else:
        values = [v.strip() for v in raw_values]

    _, bundle = _bundle_from_checkpoint(rc, ws)
    tasks = load_tasks(ws.tasks)
    config = InferenceConfig(alpha=rc.eval.alpha, k=rc.eval.k, streams=rc.eval.streams)

    def retrain(overrides: dict):
        from . import store, trainer
        from .encoders import EmbeddingProvider
        from .evalkit import ModelBundle

        state = _load_train_state(rc, ws)
        if "beta" in overrides:
            state.config.beta = float(overrides["beta"])
        if overrides.get("prompt_only_templates"):
            state.config.prompt_only_templates = True
        if "db_size" in overrides:
            size = int(overrides["db_size"])
            img = store.EmbeddingMatrix(state.data.db_image_index.matrix.values[:size], normalized=True)
            cap = store.EmbeddingMatrix(state.data.db_caption_index.matrix.values[:size], normalized=True)
            state.data.db_image_index = store.FlatIndex(img)
            state.data.db_caption_index = store.FlatIndex(cap)
        trainer.run_training(state)
        return ModelBundle(
            phi_m=state.phi_m, phi_a=state.phi_a, composer=state.composer,
            db_image_index=state.data.db_image_index, db_caption_index=state.data.db_caption_index,
            features=EmbeddingProvider(store.load(ws.eval_images)),
        )

    runner = SweepRunner(tasks=tasks, bundle=bundle, config=config, seed=rc.seed, retrain=retrain)
    rows = ablation_sweep(axis, values, runner)
    write_report(rows, ws.report, echo=True)
    return 0


def cmd_gradcheck() -> int:
    from .gradcheck import run_gradient_suite

    ok, lines = run_gradient_suite(seeds=10, verbose=True)
    return 0 if ok else 1


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.threads:
        _set_thread_env(args.threads)

    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("KEDS_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    from .config import load_config
    from .errors import KedsError

    try:
        rc = load_config(args.config)
        if args.seed is not None:
            rc.seed = args.seed
        if args.alpha is not None:
            rc.eval.alpha = args.alpha
        if args.beta is not None:
            rc.train.beta = args.beta
        if args.topk is not None:
            rc.eval.k = args.topk
            rc.train.k = args.topk
        if args.streams is not None:
            rc.eval.streams = args.streams
        log.info("effective config: %s", json.dumps(rc.to_dict(), sort_keys=True))

        ws = Workspace(args.out, args.db)
        if args.command == "gen-synth":
            return cmd_gen_synth(rc, ws)
        if args.command == "build-db":
            return cmd_build_db(rc, ws)
        if args.command == "mine":
            return cmd_mine(rc, ws)
        if args.command == "train":
            return cmd_train(rc, ws)
        if args.command == "eval":
            return cmd_eval(rc, ws)
        if args.command == "sweep":
            return cmd_sweep(rc, ws, args.axis, args.values)
        if args.command == "gradcheck":
            return cmd_gradcheck()
        raise KedsError(f"unhandled command {args.command}")
    except KedsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
