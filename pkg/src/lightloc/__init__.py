"""Geolocation of light and temperature loggers by learned similarity to reference days."""

__version__ = "0.1.0"
