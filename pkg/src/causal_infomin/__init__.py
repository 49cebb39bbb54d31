"""Causal information-minimization debiasing on a synthetic biased multimodal task."""

__version__ = "0.1.0"
