"""Explainable attribute-aware recommendation from co-purchase attribute networks.

Pipeline: ingest interactions and item attributes, build the co-purchase graph
and its per-attribute induced subgraphs, embed each network's adjacency rows
with a deep autoencoder, learn per-user attention over attributes jointly with
a pairwise ranking loss, then rank and explain recommendations.
"""

__version__ = "0.1.0"
