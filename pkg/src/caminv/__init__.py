"""Camera-invariant face anti-spoofing on a controllable synthetic corpus."""

__version__ = "0.1.0"
