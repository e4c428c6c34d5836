"""Desk-scale text-driven 2D whole-body motion generation stack."""

__version__ = "0.1.0"
