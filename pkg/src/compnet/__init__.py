"""Joint attribute/object/composition classification with composed classifiers."""

__version__ = "0.1.0"
