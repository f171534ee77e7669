"""End-to-end differentiable KG question answering with follow and min-intersection."""

__version__ = "0.1.0"
