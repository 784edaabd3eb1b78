"""Embryo viability scoring from time-lapse sequences: data model, network, training and evaluation."""

__version__ = "0.1.0"
