"""Map matching and similar-trajectory retrieval for low-rate cell-tower logs."""

__version__ = "0.1.0"
