"""Test package for fuseplan."""
