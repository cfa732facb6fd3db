"""Zero-dynamics attack laboratory for switched second-order consensus networks."""

__version__ = "0.1.0"
