"""Fan Duality Model: complex Givens-rotation scan plus a local-global token cache."""

__version__ = "0.1.0"
