"""tensordti: siamese dual-encoder interaction model over precomputed
embeddings, with reliability scoring and virtual-screening enrichment
analytics."""

__version__ = "0.1.0"
