"""Black-box detector design optimisation with learned surrogates."""

__version__ = "0.1.0"
