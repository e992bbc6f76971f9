"""Deep Q-learning bidder for a simulated GSP ad exchange."""

__version__ = "0.1.0"
