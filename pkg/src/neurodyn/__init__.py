"""neurodyn: personalized functional networks from vertex signals on meshes."""

__version__ = "0.1.0"
