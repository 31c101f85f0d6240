"""Desk-scale Fast AdvProp: a small numpy autograd engine, dual-BN networks,
gradient-reuse adversarial training, cost accounting and a corruption suite."""

__version__ = "0.1.0"
