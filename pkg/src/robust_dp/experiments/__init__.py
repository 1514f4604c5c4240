"""Experiment builders used by the command-line harness."""
