"""Embedding-level person search toolkit.

Scene-filtered two-phase retrieval, contrastive scene-scoring objectives with
analytic gradients, an instance-matching re-id loss, objective-graph
well-posedness analysis, dataset/partition tooling, and the metric suite —
all verified at desk scale on synthetic or precomputed embeddings.
"""

__version__ = "0.1.0"
