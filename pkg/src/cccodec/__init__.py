"""Grouped cross-channel context entropy modeling and coding for image
latents, with spatial-only and 3D-mask baselines, a bit-exact range
coder, toy-scale training, and the measurement tooling around them."""

__version__ = "0.1.0"
