"""Content-weighted image compression with trimmed convolutional arithmetic coding."""

__version__ = "0.1.0"
