"""Layer-wise mixed-precision post-training quantization on small transformers."""

__version__ = "0.1.0"
