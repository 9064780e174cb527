"""Speech factorization into rhythm, pitch, content and timbre factors."""

__version__ = "0.1.0"
