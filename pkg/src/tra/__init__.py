"""Temporal routing adaptor: multi-predictor regression with a learned router."""

__version__ = "0.1.0"
