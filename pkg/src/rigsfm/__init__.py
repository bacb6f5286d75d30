"""Global structure-from-motion for rigidly mounted multi-camera systems."""

__version__ = "0.1.0"
