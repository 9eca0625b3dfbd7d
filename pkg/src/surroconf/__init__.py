"""Cloud-surrogate overlay for multi-party mobile video conferencing."""

__version__ = "0.1.0"
