"""Multi-CBF synthesis for control-affine systems whose L_g h vanishes on the safe set."""

__version__ = "0.1.0"
