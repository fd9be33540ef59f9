"""DaT-SPECT PD/control classification: volumes -> slice triplets -> CNN -> metrics."""

__version__ = "0.1.0"
