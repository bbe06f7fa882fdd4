"""Desk-scale neural machine translation with recurrent-LM fusion."""

__version__ = "0.1.0"
