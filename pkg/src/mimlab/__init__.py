"""Masked image modeling at desk scale."""
