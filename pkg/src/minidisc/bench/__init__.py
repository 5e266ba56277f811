"""Synthetic tasks, experiment configs, the experiment runner, plots and the CLI."""
