"""Policy-gradient architecture search over a weight-sharing cell supernetwork."""

__version__ = "0.1.0"
