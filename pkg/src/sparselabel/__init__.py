"""Sparse patch coding with learned per-pixel label transfer.

Pipeline in brief: learn unit-norm patch dictionaries without supervision,
sparse-code every pixel's surrounding patch (batch orthogonal matching
pursuit), stack rectified multi-scale activations into one sparse feature
vector per pixel, then reconstruct a task labeling (contours, semantic parts)
by spatially averaging the outputs of per-position logistic classifiers.
"""

__version__ = "0.1.0"
