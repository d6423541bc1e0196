"""Localized flux, cover and cascade diagnostics for 3D MHD turbulence."""

__version__ = "0.1.0"
