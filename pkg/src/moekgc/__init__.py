"""Multimodal knowledge graph completion toolkit.

Entity embeddings fuse per-modality features through mixtures of experts
weighted by estimated mutual information; triples are scored by complex
rotation and trained against entropy-weighted negative samples.
"""

__version__ = "0.1.0"
