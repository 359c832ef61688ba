"""Seq2Seq forecasting with teacher forcing, scheduled sampling, and
temporal progressive growing curricula."""

__version__ = "0.1.0"
