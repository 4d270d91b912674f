"""Graph-conditioned neural-process transfer learning for fault detection."""

__version__ = "0.1.0"
