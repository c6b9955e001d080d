"""Deterministic simulator of an enclave machine with bi-directionally
isolated enclaves, a system-call monitor enclave and pairwise shared EPC pages."""

__version__ = "0.1.0"
