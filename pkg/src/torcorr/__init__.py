"""AS-level traffic correlation potential for Tor, measured with RIPE Atlas traceroutes."""

__version__ = "0.1.0"
