"""Field-of-junctions priors for volumetric denoising and reconstruction."""

__version__ = "0.1.0"
