"""Tests for DRRNet."""
