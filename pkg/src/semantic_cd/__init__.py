"""Open-vocabulary semantic change detection on bi-temporal image pairs."""

__version__ = "0.1.0"
