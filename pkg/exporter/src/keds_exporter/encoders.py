"""Dual-encoder backends.

``seeded:<dim>`` is the offline backend: a deterministic random-projection
encoder (word hashing for text, an 8x8 grayscale thumbnail for images)
that needs no downloaded weights. ``clip:<model>`` uses an installed
open_clip checkpoint when the optional dependencies are present. Both
return L2-normalized float32 features.
"""

from __future__ import annotations

import hashlib
import io

import numpy as np
from PIL import Image

from .tokenizer import tokenize


def _normalize(block: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(block, axis=1, keepdims=True)
    return (block / np.maximum(norms, 1e-12)).astype(np.float32)


class SeededEncoder:
    """Deterministic projection encoder; features depend only on content."""

    THUMB = 8

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._image_proj = rng.standard_normal((self.THUMB * self.THUMB, dim)).astype(np.float32)

    def _word_vector(self, word: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}/{word}".encode()).digest()
        word_rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return word_rng.standard_normal(self.dim).astype(np.float32)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            words = tokenize(text) or [""]
            out[i] = np.sum([self._word_vector(w) for w in words], axis=0)
        return _normalize(out)

    def encode_images(self, blobs: list[bytes]) -> np.ndarray:
        out = np.zeros((len(blobs), self.dim), dtype=np.float32)
        for i, blob in enumerate(blobs):
            image = Image.open(io.BytesIO(blob)).convert("L").resize((self.THUMB, self.THUMB))
            pixels = np.asarray(image, dtype=np.float32).reshape(-1) / 255.0
            out[i] = (pixels - pixels.mean()) @ self._image_proj
            if not np.any(out[i]):
                out[i, 0] = 1.0  # completely flat image; pin a direction
        return _normalize(out)


class ClipEncoder:  # pragma: no cover - requires optional heavyweight deps
    """open_clip-backed dual encoder; install the 'clip' extra to use it."""

    def __init__(self, model_name: str = "ViT-B-32", pretrained: str = "openai"):
        try:
            import open_clip
            import torch
        except ImportError as exc:
            raise RuntimeError(
                "the clip encoder needs torch and open_clip_torch installed "
                "(pip install 'keds-exporter[clip]')"
            ) from exc
        self._torch = torch
        self.model, _, self.preprocess = open_clip.create_model_and_transforms(
            model_name, pretrained=pretrained)
        self.tokenizer = open_clip.get_tokenizer(model_name)
        self.model.eval()
        self.dim = self.model.text_projection.shape[1]

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        with self._torch.no_grad():
            feats = self.model.encode_text(self.tokenizer(texts))
        return _normalize(feats.cpu().numpy().astype(np.float32))

    def encode_images(self, blobs: list[bytes]) -> np.ndarray:
        tensors = [self.preprocess(Image.open(io.BytesIO(b)).convert("RGB")) for b in blobs]
        with self._torch.no_grad():
            feats = self.model.encode_image(self._torch.stack(tensors))
        return _normalize(feats.cpu().numpy().astype(np.float32))


def build_encoder(identifier: str):
    """'seeded:<dim>[:seed]' or 'clip:<model>[:pretrained]'."""
    kind, _, rest = identifier.partition(":")
    if kind == "seeded":
        parts = rest.split(":") if rest else []
        dim = int(parts[0]) if parts and parts[0] else 64
        seed = int(parts[1]) if len(parts) > 1 else 0
        return SeededEncoder(dim=dim, seed=seed)
    if kind == "clip":
        parts = rest.split(":") if rest else []
        kwargs = {}
        if parts and parts[0]:
            kwargs["model_name"] = parts[0]
        if len(parts) > 1:
            kwargs["pretrained"] = parts[1]
        return ClipEncoder(**kwargs)
    raise ValueError(f"unknown encoder identifier {identifier!r}")
