"""Label-semantic knowledge distillation on synthetic long-tailed relation data."""

__version__ = "0.1.0"
