"""Desk-scale triplane-NeRF reconstruction: render, fit, extract, evaluate."""

__version__ = "0.1.0"
