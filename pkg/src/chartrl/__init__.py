"""Multi-turn self-correction RL testbed on a miniature chart language."""

__version__ = "0.1.0"
