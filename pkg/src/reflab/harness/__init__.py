"""Serialization, configuration, evaluation, reports and the command line."""
