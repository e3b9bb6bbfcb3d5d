"""Desk-scale masked-spectrogram pretraining with contrastive
audio-text alignment, plus its evaluation protocols."""

__version__ = "0.1.0"
