"""Toxicity-avoiding fine-tuning on a toy language model.

The EMD-over-embeddings penalty, its mean-embedding lower bound and the
complementary-likelihood penalty, built on a small reverse-mode autodiff
engine, with an exact network-simplex transport solver to check the bound.
"""

__version__ = "0.1.0"
