"""Meta-split learning over a simulated wireless link."""

__version__ = "0.1.0"
