"""Concept-embedding unsupervised domain adaptation with relaxed adversarial alignment."""

__version__ = "0.1.0"
