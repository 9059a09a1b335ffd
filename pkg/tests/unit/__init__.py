"""Unit tests package for fuseplan."""
