"""Discourse-weighted low-rank adapter fine-tuning toolkit."""

__version__ = "0.1.0"
