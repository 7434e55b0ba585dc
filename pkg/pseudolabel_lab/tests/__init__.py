"""Test suite for pseudolabel-lab."""
