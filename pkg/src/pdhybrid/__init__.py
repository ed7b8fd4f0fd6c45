"""Hybrid VGG13 / bidirectional GRU / additive-attention EEG classifier on a numpy autodiff core."""

__version__ = "0.1.0"
