"""Universal successor representations: networks, training, exact oracles and experiments."""

__version__ = "0.1.0"
