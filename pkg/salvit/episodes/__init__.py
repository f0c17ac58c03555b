"""Synthetic data, episode sampling, metrics, training and experiment drivers."""
