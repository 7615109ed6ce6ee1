"""Non-stationary spatial smoothing by process convolution with focus-parameterized kernels."""

__version__ = "0.1.0"
