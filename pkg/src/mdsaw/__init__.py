"""Surface-acoustic-wave propagation on oriented piezoelectric crystals."""

__version__ = "0.1.0"
