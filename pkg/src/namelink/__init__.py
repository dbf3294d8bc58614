"""Linking named people in captions to person detections in images."""

__version__ = "0.1.0"

PAD_ID = 0
NAME_ID = 1
