"""Greedy layer pruning of mean-field networks by local and global imitation."""

__version__ = "0.1.0"
