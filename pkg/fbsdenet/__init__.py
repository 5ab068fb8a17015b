"""Neural-surrogate FBSDE simulation, multilevel training and strong-error experiments."""

__version__ = "0.3.0"
