"""NV-center singlet photodynamics: rate-model simulation and curve fitting."""

__version__ = "0.1.0"
