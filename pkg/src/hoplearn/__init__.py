"""Graph learning over k-hop neighborhoods built with MapReduce-style rounds."""

__version__ = "0.1.0"
