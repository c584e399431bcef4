"""Retrieval, reward and guardrail toolkit for grounded support QA."""

__version__ = "0.1.0"
