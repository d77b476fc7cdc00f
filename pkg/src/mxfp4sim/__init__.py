"""MXFP4 micro-scaling training simulator."""

__version__ = "0.1.0"
