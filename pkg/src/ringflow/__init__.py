"""Joint shape and svBRDF recovery with a recurrent-ResNet flow of the sphere."""

__version__ = "0.1.0"
