"""Static environment priors from posed camera imagery."""

__version__ = "0.1.0"
