"""Message passing (AMP, VAMP, GVAMP) for rotationally invariant designs, with state evolution."""

__version__ = "0.1.0"
