"""Class-label-distribution inference from the parameters of fully connected classifiers."""

__version__ = "0.1.0"
