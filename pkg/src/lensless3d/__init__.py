"""Single-shot 3D reconstruction for diffuser-based lensless cameras."""

__version__ = "0.1.0"
