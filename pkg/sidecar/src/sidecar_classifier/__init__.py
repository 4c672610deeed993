"""Classifier sidecar: a tiny neural network behind the newline-JSON protocol."""

from .model import TinyNet, build_fixture, bundled_model_path, load_model
from .serve import handle_request, handshake_of, serve

__all__ = [
    "TinyNet",
    "build_fixture",
    "bundled_model_path",
    "load_model",
    "handle_request",
    "handshake_of",
    "serve",
]
