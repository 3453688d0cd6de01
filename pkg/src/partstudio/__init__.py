"""Part-compositional creature generation studio."""

__version__ = "0.1.0"
