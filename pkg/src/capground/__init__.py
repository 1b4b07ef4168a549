"""Weakly-supervised visual relationship detection from captions, desk scale.

A captioning model with top-down attention grounds caption entities to
object features; caption parsing supplies relation structure; the grounded
pairs train a relation classifier evaluated with PredCls Recall@K.
"""

__version__ = "0.1.0"
