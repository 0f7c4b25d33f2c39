"""Conditional concept bottleneck models grounded by a feedback-driven concept agent."""

__version__ = "0.1.0"
