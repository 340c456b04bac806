"""Semantic-segmentation-guided generative image codec.

A desk-scale learned image compression toolkit: rate-distortion codec with
a real entropy-coded bitstream, adversarial fine-tuning guided by a
segmentation discriminator, and a decode-time realism knob that traverses
the distortion-perception trade-off from a single compressed stream.
"""

__version__ = "0.1.0"
