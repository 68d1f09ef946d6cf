"""Contextual code generation with grammar-constrained decoding."""
