"""Toy-scale frozen-transformer fine-tuning lab.

Compares prompt splicing (prepending learned tokens to the sequence) with
residual cross-attention prompting (reading prompts through a dedicated
attention branch) on a small vision transformer, with exact cost models,
attention-mass diagnostics, and deterministic training throughout.
"""

__version__ = "0.1.0"
