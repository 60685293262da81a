"""Tooling for domain-adapted ESG question answering: checkpoint arithmetic,
dataset splits, generative and readability metrics, knowledge-base
retrieval, energy accounting and an evaluation harness."""
from __future__ import annotations

__version__ = "0.1.0"
