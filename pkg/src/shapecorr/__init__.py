"""Template-deformation networks for non-rigid 3D shape correspondence."""

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "cli",
    "datagen",
    "geometry",
    "inference",
    "losses",
    "network",
    "training",
]
