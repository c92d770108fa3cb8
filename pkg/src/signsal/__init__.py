"""Sign-aware and multi-class saliency maps for small CNNs, with a deletion benchmark."""

__version__ = "0.1.0"
