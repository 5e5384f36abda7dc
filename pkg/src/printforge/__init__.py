"""printforge: controllable, identity-preserving fingerprint image generation
with a conditional diffusion model, plus the evaluation protocol suite."""

__version__ = "0.1.0"
