"""Volumetric segmentation engine with a global axial self-attention bottleneck.

Subpackages follow the pipeline: tensor (autodiff engine), gasa (attention
block), backbone (encoder-decoder network), losses/metrics, volume
(container, file format, preprocessing), phantom (synthetic data), training
and inference, verify (self-checks), cli.
"""

__version__ = "0.1.0"
