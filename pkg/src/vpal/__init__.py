"""Generalized lasso solvers (VPAL, ADMM) with regularization-parameter selection."""
