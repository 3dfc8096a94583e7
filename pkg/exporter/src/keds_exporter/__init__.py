"""keds-exporter: bridge from image-text datasets to the engine's file formats.

Encodes images and captions with a dual-encoder backend, extracts subject
noun-phrase spans, and writes the engine's binary embedding banks (KEDB),
metadata JSONL, and the vocabulary mapping JSON. The engine is consumed
only through those file formats.
"""

from .export import ExportManifest, ExportResult, export

__all__ = ["ExportManifest", "ExportResult", "export"]

__version__ = "0.1.0"
