"""keds: retrieval-augmented embedding projection for zero-shot composed retrieval.

The package is organized as a small numpy library:

- ``numeric``: dense tensors with reverse-mode autodiff
- ``store``: embedding banks, flat / IVF top-K search, binary persistence
- ``encoders``: frozen token composer, embedding providers, synthetic corpus
- ``bkp``: knowledge-guided projection network (two cross-attention stacks)
- ``mining``: pseudo-triplet construction from image-caption pairs
- ``trainer``: dual-stream losses, AdamW, schedules, checkpoints
- ``evalkit``: hybrid inference, baselines, recall metrics, ablation sweeps
- ``cli``: pipeline front door (gen-synth / build-db / mine / train / eval / sweep / gradcheck)
"""

__version__ = "0.1.0"
