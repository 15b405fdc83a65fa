"""EEG-based neural envelope tracking: envelopes, GCMI TMIFs, group statistics
and subject-level detection."""

__version__ = "0.1.0"
