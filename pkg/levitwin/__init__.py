"""Digital twin of a magnetically levitated mg-scale sensor under feedback cooling."""

__version__ = "0.1.0"
