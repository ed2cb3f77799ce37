"""Asymptotically distribution-free goodness-of-fit tests for regression models."""
