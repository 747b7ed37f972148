"""Attribute-level personalization of a small text-conditioned diffusion model.

The package pipelines a synthetic attribute-factored shape corpus through
concept pre-learning, decoupled self-augmentation with automatic + human
curation, dual identifier training, and inference-time semantic adjustment,
with an exact pixel-level attribute oracle standing in for learned scoring.
"""

__version__ = "0.1.0"
