"""Overpaint: a toolkit for building, training, and evaluating jazz piano
overpainting models on symbolic music.

Overpainting keeps a tune's melody and harmony while re-texturing everything
else. The pipeline here extracts aligned Original/Variation excerpt pairs from
performances and lead sheets, augments and tokenizes them, trains a small
decoder-only transformer on a self-contained autodiff engine, samples new
variations, and scores corpora with standard symbolic-music metrics.
"""

__version__ = "0.1.0"
