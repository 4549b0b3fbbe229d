"""Shape generation over unsigned distance fields.

Pipeline: a point-based autoencoder learns a compact latent space of UDFs
from a procedural shape corpus, a latent denoising diffusion model samples
new codes (optionally conditioned on a category), and a pseudo-sign marching
cubes pass extracts open or closed triangle meshes from the decoded fields.
"""

__version__ = "0.1.0"
