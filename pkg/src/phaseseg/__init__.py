"""Unsupervised phase segmentation of 2D skeleton sequences.

Stages: a denoising spatio-temporal graph encoder (:mod:`astgcn`), a projector
with phase prototypes trained from optimal-transport pseudo-labels
(:mod:`projector`, :mod:`sot`, :mod:`clustering`), and dataset-level evaluation
(:mod:`metrics`). :mod:`cli` wires them together.
"""

__version__ = "0.1.0"
