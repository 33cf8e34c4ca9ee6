"""Multi-grained interaction model for multi-modal entity alignment."""

__version__ = "0.1.0"
