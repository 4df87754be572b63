"""PPO with dense rewards derived from kernel distances to state-only demonstrations."""

__version__ = "0.1.0"
