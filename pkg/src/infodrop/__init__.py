"""Information Dropout: multiplicative log-normal noise trained under the IB Lagrangian."""
__version__ = "0.1.0"
