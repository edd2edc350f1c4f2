"""Evaluation dataset construction and metrics."""
