"""Entropy-regularised OTC market making: simulator, closed-form quote policy,
policy-iteration and actor-critic trainers, and numerical oracles."""

__version__ = "0.1.0"
