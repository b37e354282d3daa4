"""Continual-learning fault diagnosis with a growing ensemble of CNN episode models."""

from . import curriculum, ensemble, harness, metrics, mtf, scheduler, signalgen, tensornet

__all__ = ["curriculum", "ensemble", "harness", "metrics", "mtf", "scheduler", "signalgen", "tensornet"]
__version__ = "0.1.0"
