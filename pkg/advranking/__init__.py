"""Adversarial ranking attacks and defenses for small embedding models."""


class AdvrankingError(RuntimeError):
    """Base class of all errors raised by the advranking library."""
