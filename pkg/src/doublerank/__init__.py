"""Reinforcement learning to rank documents and display positions with Double DQN."""

__version__ = "0.1.0"
