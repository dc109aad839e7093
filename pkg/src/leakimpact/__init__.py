"""Leakage Impact Score toolkit."""
