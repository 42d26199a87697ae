"""Error-propagation reliability models for multi-stage pipelines."""
__version__ = "0.1.0"
