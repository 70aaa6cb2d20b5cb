"""Untangled multispectral adaptation of frozen RGB vision transformers, on a numpy autodiff core."""

__version__ = "0.1.0"
