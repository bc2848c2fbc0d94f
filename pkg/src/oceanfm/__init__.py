"""Masked-autoencoder foundation model for ocean-colour regression."""

__version__ = "0.1.0"
