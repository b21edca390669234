"""Arousal event detection in polysomnography recordings.

Synthetic PSG generation, preprocessing, an anchor-based detection network
with a from-scratch autodiff engine, transfer-learning surgery for channel
mismatch, event decoding/evaluation, and nonparametric statistics.
"""

__version__ = "0.1.0"
