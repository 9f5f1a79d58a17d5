"""Self-supervised object discovery by matching segment graphs across scenes."""

__version__ = "0.1.0"
