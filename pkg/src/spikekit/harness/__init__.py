"""Experiment plumbing: datasets, configs, checkpoints, sweeps and the CLI."""
