"""Semantic OOD detection across domains on synthetic multi-domain benchmarks."""

__version__ = "0.1.0"
