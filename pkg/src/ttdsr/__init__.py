"""Super-resolution in the Tchebichef transform domain."""

__version__ = "0.1.0"
