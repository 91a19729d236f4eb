# app/__init__.py
"""Laboratorio MLS: aproximación por mínimos cuadrados móviles sobre muestras aleatorias."""

__version__ = "0.4.0"
