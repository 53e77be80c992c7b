"""Talking-head generation with explicit head-motion modeling, at desk scale."""

__version__ = "0.1.0"
