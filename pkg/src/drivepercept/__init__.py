"""End-to-end driving perception with a sequential latent model."""

__version__ = "0.1.0"
