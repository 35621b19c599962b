"""Cycle-synchronous modeling, control and certification of current-mode dc-dc converters."""

__version__ = "0.1.0"
