"""GAN training with a discriminator-feedback correction loop.

Subpackages: autodiff engine, network builders, feedback injection,
training loops, evaluation harness, and an HTTP inference service.
"""

__version__ = "0.1.0"
