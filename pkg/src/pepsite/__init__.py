"""Peptide binding-site prediction on protein structures with spline-activation
networks, a distance-aware training loss and a geometric evaluation suite."""

__version__ = "0.1.0"
