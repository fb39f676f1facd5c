"""Perception on top of a text-to-image latent diffusion backbone.

Subpackages: ``backbone`` (feature extraction), ``prompting`` (conditioning
builders), ``captions`` (captioner and cleaner clients with a JSONL cache),
``domain`` (caption modifiers and personalization), ``heads`` (task heads and
losses), ``engine`` (training, metrics, analyses) and ``workbench`` (config,
datasets, plots and the ``tadp`` command line).
"""

__version__ = "0.1.0"
