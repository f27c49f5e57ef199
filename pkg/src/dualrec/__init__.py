"""Dual-target cross-domain recommender.

Graph-convolutional user/item encoding per domain, interpolative (mixup)
augmentation of common-user embeddings, classifier-guided disentanglement
into shared / specific / independent preference codes, attention fusion,
and cosine-MLP scoring, with leave-one-out top-k evaluation.
"""

__version__ = "0.1.0"
