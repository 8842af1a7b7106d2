"""Intent-driven build, deploy and over-the-air regression testing for RAN workloads."""

__version__ = "0.1.0"
