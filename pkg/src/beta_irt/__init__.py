"""Beta-IRT models fitted by gradient descent over link-transformed parameters."""

__version__ = "0.1.0"
