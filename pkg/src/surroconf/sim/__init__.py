"""Deterministic discrete-event simulation of a conference session."""
