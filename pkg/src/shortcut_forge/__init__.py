"""shortcut-forge: a synthetic benchmark for watermark shortcut reliance.

Generates an image-caption-label corpus with label-correlated watermark
glyphs, trains contrastive (dual-encoder) and supervised (5-head
classifier) models on it with a built-in reverse-mode autodiff engine, and
measures shortcut reliance through AUC on real/shortcut/adversarial test
variants, zero-shot scoring, and integrated-gradients consistency.
"""

__version__ = "0.1.0"
