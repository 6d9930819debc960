"""Train small classifiers with SGD and DP-SGD and measure how privacy changes robustness."""

__version__ = "0.1.0"
