"""Flow matching and mixture-of-experts flow matching on small synthetic problems."""

__version__ = "0.1.0"
