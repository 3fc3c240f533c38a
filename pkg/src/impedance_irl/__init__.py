"""Learning variable impedance skills from demonstrations with adversarial IRL."""

__version__ = "0.1.0"
