"""Experiment harness: configuration, replica orchestration, CSV output, CLI."""
