"""Discrete-event harness, scenario configuration, experiment drivers and CLI."""
