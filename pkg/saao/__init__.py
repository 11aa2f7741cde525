"""Spectral-aware Admix attack package for 3D point clouds.

The package is intentionally independent from the command-line entrypoint and
from output directory conventions. Domain modules work on numpy arrays and
plain dataclasses; orchestration lives in ``harness`` and ``main.py``.
"""
