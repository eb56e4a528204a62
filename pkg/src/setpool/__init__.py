"""Learned attention pooling of embedding sets with an actor-critic weighting agent."""

__version__ = "0.1.0"
