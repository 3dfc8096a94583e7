"""Ablation axes on a miniature run: mixing weight, context size, knockouts.

Trains a small model once, then sweeps inference-time axes and prints the
machine-readable report rows.
"""

import numpy as np

from keds import evalkit, mining, store, trainer
from keds.encoders import EmbeddingProvider, build_composer
from keds.synth import SynthConfig, synth_generate

seed = 9
composer = build_composer(seed, dim=64, vocab_size=1024, max_len=32, blocks=2, heads=4)
corpus = synth_generate(SynthConfig(n_train=600, n_db=500, n_tasks=60), composer, seed)
triplets = mining.mine(corpus.train_records, store.FlatIndex(corpus.train_captions))
data = trainer.TrainData(
    corpus.train_images, corpus.train_captions,
    store.FlatIndex(corpus.db_images), store.FlatIndex(corpus.db_captions),
    {t.image_id: t for t in triplets},
)
state = trainer.init_state(trainer.desk_config(seed=seed, steps=300, warmup_steps=40), composer, data)
trainer.run_training(state)
print(f"trained {state.step} steps")

bundle = evalkit.ModelBundle(
    state.phi_m, state.phi_a, composer,
    data.db_image_index, data.db_caption_index,
    EmbeddingProvider(corpus.eval_images),
)
runner = evalkit.SweepRunner(
    tasks=corpus.tasks, bundle=bundle,
    config=evalkit.InferenceConfig(alpha=0.5, k=16), seed=seed,
)

for axis, values in (
    ("alpha", [0.0, 0.25, 0.5, 0.75, 1.0]),
    ("k", [1, 4, 16]),
    ("knockout", ["wo_topk_img", "wo_topk_cap", "wo_phi_a"]),
):
    rows = evalkit.ablation_sweep(axis, values, runner)
    print(f"\naxis: {axis}")
    for row in rows:
        print(f"  {str(row['value']):<12} R1={row['R1']:.3f} R5={row['R5']:.3f} "
              f"R10={row['R10']:.3f} R50={row['R50']:.3f}")
