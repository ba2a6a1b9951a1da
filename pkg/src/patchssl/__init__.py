"""Tiled-patch self-supervised learning for 16-bit grayscale radiographs.

Pipeline stages: patch tiling, grayscale-specific augmentation, SSL
pretraining (contrastive, bootstrap, clustering), attention-based bag
pooling, linear evaluation / finetuning, and prototype analysis.
"""

__version__ = "0.1.0"
