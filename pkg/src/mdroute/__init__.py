"""Multi-task neural construction for multi-depot vehicle routing, in numpy."""

from .instances import ALL_VARIANTS, VARIANT_NAMES, Instance, VariantFlags, augment, generate_instance

__all__ = ["ALL_VARIANTS", "VARIANT_NAMES", "Instance", "VariantFlags", "augment", "generate_instance"]
__version__ = "0.1.0"
