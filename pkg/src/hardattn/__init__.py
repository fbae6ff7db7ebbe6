"""Hard visual attention under partial observability with flow-based Partial VAE and EIG glimpse selection."""

__version__ = "0.1.0"
