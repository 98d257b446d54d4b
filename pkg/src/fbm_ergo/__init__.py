"""Simulation of fBm-driven SDEs and their self-coupling construction."""
