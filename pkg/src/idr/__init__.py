"""Joint recovery of implicit-surface geometry, appearance and cameras from masked images."""

__version__ = "0.1.0"
