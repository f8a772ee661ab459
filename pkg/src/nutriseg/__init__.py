"""Multi-task food understanding toolkit: instruction data forging, a toy
vision-language model with regression and mask heads, training and evaluation."""

__version__ = "0.1.0"
