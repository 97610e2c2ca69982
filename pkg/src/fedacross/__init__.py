"""Federated few-shot domain adaptation with prototype upstreaming."""

__version__ = "0.1.0"
