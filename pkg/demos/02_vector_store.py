"""The knowledge database: exact search, IVF search, and persistence.

Builds a bank of normalized features, compares flat search against the
inverted-file approximation, and round-trips the bank through the binary
format.
"""

import tempfile
from pathlib import Path

import numpy as np

from keds import store

rng = np.random.default_rng(1)
n, d = 5000, 32

values = store.normalize_rows(rng.standard_normal((n, d)).astype(np.float32))
matrix = store.EmbeddingMatrix(values, normalized=True)
flat = store.FlatIndex(matrix)

query = values[123] + 0.05 * rng.standard_normal(d).astype(np.float32)
hits = store.search_topk(flat, query, k=5)
print("flat top-5:", [(i, round(s, 4)) for i, s in hits])

ivf = store.build_ivf(matrix, partitions=64, iterations=8, seed=2)
sizes = sorted(len(p) for p in ivf.postings)
print(f"ivf: {ivf.partitions} partitions, sizes {sizes[0]}..{sizes[-1]}")

recalls = []
for _ in range(50):
    q = store.normalize_rows(rng.standard_normal((1, d)).astype(np.float32))[0]
    truth = {h[0] for h in store.search_topk(flat, q, 16)}
    approx = {h[0] for h in store.search_ivf(ivf, q, 16, nprobe=16)}
    recalls.append(len(truth & approx) / 16)
print(f"ivf recall@16 with nprobe=16/64: {np.mean(recalls):.3f}")

full = store.search_ivf(ivf, query, 5, nprobe=64)
print("full probe equals flat:", full == hits)

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "bank.kedb"
    store.save(matrix, path)
    back = store.load(path)
    print(f"round trip bit-exact: {back.values.tobytes() == matrix.values.tobytes()} "
          f"({path.stat().st_size} bytes on disk)")
