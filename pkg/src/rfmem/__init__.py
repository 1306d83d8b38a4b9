"""Random-features diffusion laboratory: Gram spectra, training dynamics and memorization."""

__version__ = "0.1.0"
