"""Boosted ensembles of binarized transformer classifiers, built on a small numpy autodiff core."""

__version__ = "0.1.0"
