"""Neural bi-lexicalized PCFG induction with a fast inside algorithm."""

__version__ = "0.1.0"
