"""Small-area under-five mortality estimation from full and summary birth
histories."""

__version__ = "0.1.0"
