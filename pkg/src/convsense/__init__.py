"""Joint acoustic-inertial conversation detection from wrist-worn sensors."""

__version__ = "0.1.0"
