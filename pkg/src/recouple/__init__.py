"""Decouple/recouple Bayesian forecasting for multivariate time series."""
