"""Grocery product recognition: learned MAC descriptors, exact K-NN search
over reference images, shortlist refinement and shelf-level evaluation."""

__version__ = "0.1.0"
