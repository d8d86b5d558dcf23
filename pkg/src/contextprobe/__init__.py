"""Measure how much small vision models lean on co-occurring context objects.

Synthetic biased scenes, object-removal edits, hand-written numpy models,
removal-based augmentation, and the robustness metrics that tie them together.
"""

__version__ = "0.1.0"
