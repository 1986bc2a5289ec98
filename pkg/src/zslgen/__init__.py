"""Attribute-conditioned feature synthesis for zero-shot classification.

Episodically meta-trained generative model plus the tooling around it:
a small reverse-mode autodiff engine, dataset formats, episode sampling,
quality-weighted classifiers, and evaluation protocols.
"""

__version__ = "0.1.0"
