"""Pseudo-query dense retrieval.

Documents are represented by K-means centroids over their token embeddings
("pseudo query embeddings"), scored against a pooled query vector with a
softmax-weighted aggregation, and retrieved with an argmax prefilter over a
flat inner-product index followed by exact rescoring.
"""

__version__ = "0.1.0"
