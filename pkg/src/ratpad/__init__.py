"""Game-theoretic presentation attack detection at desk scale."""

__version__ = "0.1.0"
