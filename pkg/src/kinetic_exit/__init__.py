"""Exit laws, envelopes and quasi-stationary behaviour of the kinetic
Langevin process killed outside the position interval (0, 1)."""

__version__ = "0.1.0"
