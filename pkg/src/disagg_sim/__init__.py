"""Simulation and scheduling toolkit for multi-round LLM serving with
prefill/decode disaggregation."""

__version__ = "0.1.0"
