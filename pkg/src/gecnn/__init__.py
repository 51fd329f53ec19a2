"""Graph edge convolution over skeleton sequences, with node and hybrid variants."""

__version__ = "0.1.0"
