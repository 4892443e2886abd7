"""Honest causal trees and forests with split-frequency importance and
sample-splitting inference for heterogeneous treatment effects."""

__version__ = "0.1.0"
