"""Lodestar: scripted virtual-user load testing with a controller/agent fleet."""

__version__ = "0.1.0"
