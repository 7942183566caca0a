"""Unified controllable image generation at desk scale.

A small multi-modal diffusion transformer backbone plus a trainable
image-instruction adapter, built on an in-house NumPy autodiff engine,
trained with rectified flow on procedurally generated condition/target
pairs and sampled with three-term classifier-free guidance.
"""

__version__ = "0.1.0"
