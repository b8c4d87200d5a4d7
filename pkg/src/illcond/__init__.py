"""Desk-scale toolkit for probing adversarial robustness of autoencoders
whose layers carry near-zero singular values."""

__version__ = "0.1.0"
