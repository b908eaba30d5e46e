from .base import ClassifierInterface, VAEInterface

__all__ = ["ClassifierInterface", "VAEInterface"]
