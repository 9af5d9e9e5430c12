"""BEV-layout to street-view generation toolkit."""

__version__ = "0.1.0"
