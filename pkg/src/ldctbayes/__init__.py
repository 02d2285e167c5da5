"""Low-dose fan-beam CT reconstruction with a dropout-reparametrised deep image prior."""

__version__ = "0.1.0"
