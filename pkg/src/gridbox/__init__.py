"""Federated Gridbox sites for anonymised mammography metadata and images."""

__version__ = "0.1.0"
