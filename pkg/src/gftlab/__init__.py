"""Guidance-free training laboratory on toy diffusion and autoregressive testbeds."""

__version__ = "0.1.0"
