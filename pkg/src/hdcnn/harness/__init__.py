"""Datasets, configuration, experiment orchestration and the command line."""
