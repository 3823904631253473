"""Learning-based spherical cortical registration on icosphere meshes."""

__version__ = "0.1.0"
