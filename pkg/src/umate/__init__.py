"""umate: unified token-space generation for truss metamaterials.

Topology, relative density and effective properties are encoded into one
codebook-quantized token space, aligned with a three-marginal optimal
transport term, and completed by a masked denoising transformer.
"""

__version__ = "0.1.0"
