"""Learning cooperative-resilience-aligned rewards in a commons gridworld."""

__version__ = "0.1.0"
