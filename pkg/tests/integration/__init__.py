"""Integration tests package for fuseplan."""
